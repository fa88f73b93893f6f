use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use facectl::eval::{
    ablation_csv, disentanglement_matrix, expression_path, eye_triplet_accuracy, lip_retrieval_accuracy,
    pose_head_mse, probe_validation, run_ablation, run_protocol, variants, AblationStudy, AudioSignal,
    ControllableModel, Controls, Evaluator, MetricsReport, ProbeValidation, ProtocolSpec, Signal, TrainedModel,
};
use facectl::image::FloatImage;
use facectl::synthworld::{generate_split, read_dataset, write_dataset, Clip, Split, WorldConfig};
use facectl::train::{load_checkpoint, load_toml, run_stage, RunOptions, StageConfig, StageId, TrainData};

use crate::run::{write_file, OutputLock, RunDescriptor, Usage};
use crate::sheet::{compose, SheetRow};

/// Flags every subcommand takes.
#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// Config file; every default lives there.
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the `seed` key of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, locked for the duration of the run.
    #[arg(long)]
    pub out: PathBuf,
    /// Dotted-key override applied after `--seed`, e.g. `lr.g0=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        self.seed.map(|s| format!("seed={s}")).into_iter().chain(self.set.iter().cloned()).collect()
    }

    fn descriptor(&self, subcommand: &str) -> RunDescriptor {
        RunDescriptor {
            subcommand: subcommand.to_string(),
            config: self.config.clone(),
            inputs: Default::default(),
            out: self.out.clone(),
            seed: self.seed,
            overrides: self.set.clone(),
        }
    }
}

fn load_clips(dir: &Path) -> Result<Vec<Clip>> {
    let (_, clips) = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    Ok(clips)
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(TrainedModel::from_checkpoint(&ckpt)?)
}

/// A clip by id, or by position in the split.
fn find_clip<'a>(clips: &'a [Clip], key: &str) -> Result<&'a Clip> {
    if let Some(c) = clips.iter().find(|c| c.clip_id == key) {
        return Ok(c);
    }
    key.parse::<usize>()
        .ok()
        .and_then(|i| clips.get(i))
        .ok_or_else(|| Usage(format!("no clip `{key}` in a split of {} clips", clips.len())).into())
}

fn float_frames(c: &Clip) -> Vec<FloatImage> {
    c.frames.iter().map(|f| f.to_float()).collect()
}

pub fn gen_data(common: &Common) -> Result<()> {
    let _lock = OutputLock::acquire(&common.out)?;
    let (cfg, resolved): (WorldConfig, String) = load_toml(&common.config, &common.overrides())?;
    let mut run = common.descriptor("gen-data");
    for split in [Split::Train, Split::Test] {
        let clips = generate_split(&cfg, split)?;
        let dir = common.out.join(split.name());
        let manifest = write_dataset(&clips, cfg.seed, &dir)?;
        log::info!("{} split: {} clips in {}", split.name(), manifest.clips.len(), dir.display());
        run.input(&format!("{}_clips", split.name()), manifest.clips.len());
    }
    run.write(&resolved)
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// probe, 1, 2-lip, 2-eye, 2-pose or 3; must match the config.
    #[arg(long)]
    pub stage: String,
    /// Training split written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint of the earlier stages; defaults to the config's input_checkpoint.
    #[arg(long)]
    pub ckpt_in: Option<PathBuf>,
    /// Continues an interrupted run of the same stage, config and data.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let c = &a.common;
    let _lock = OutputLock::acquire(&c.out)?;
    let (cfg, resolved): (StageConfig, String) = load_toml(&c.config, &c.overrides())?;
    cfg.validate()?;
    let stage = StageId::parse(&a.stage)?;
    if stage != cfg.stage {
        return Err(Usage(format!("--stage {stage} but {} is a stage {} config", c.config.display(), cfg.stage)).into());
    }
    let mut run = c.descriptor("train");
    run.input("stage", stage);
    run.input("data", a.data.display());
    let data = TrainData::new(load_clips(&a.data)?)?;
    let input_path = a.ckpt_in.clone().or_else(|| cfg.input_checkpoint.clone());
    let input = match &input_path {
        Some(p) => {
            run.input("ckpt_in", p.display());
            Some(load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?)
        }
        None => None,
    };
    let resume = match &a.resume {
        Some(p) => {
            run.input("resume", p.display());
            Some(load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?)
        }
        None => None,
    };
    run.write(&resolved)?;
    let out = run_stage(&cfg, &data, input.as_ref(), &RunOptions { out_dir: Some(&c.out), resume: resume.as_ref() })?;
    if let Some(p) = out.path {
        log::info!("stage {stage} finished after step {}: {}", out.checkpoint.step, p.display());
    }
    Ok(())
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub protocols: Vec<String>,
    pub max_clips: usize,
    pub matrix: bool,
    pub heads: bool,
    pub retrieval: RetrievalConfig,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub negatives: usize,
    pub min_offset: usize,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Test split written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Split whose real frames give the sync reference for NLSE-C; usually the training split.
    #[arg(long)]
    pub reference_data: Option<PathBuf>,
    /// Restricts the run to these protocols instead of the config's list.
    #[arg(long)]
    pub protocol: Vec<String>,
}

#[derive(Serialize)]
struct HeadsReport {
    lip_retrieval_top1: f64,
    eye_triplet_accuracy: f64,
    pose_mse: f64,
    probe: ProbeValidation,
}

fn limit(mut clips: Vec<Clip>, max: usize) -> Vec<Clip> {
    if max > 0 {
        clips.truncate(max);
    }
    clips
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let c = &a.common;
    let _lock = OutputLock::acquire(&c.out)?;
    let (cfg, resolved): (EvalConfig, String) = load_toml(&c.config, &c.overrides())?;
    let names = if a.protocol.is_empty() { &cfg.protocols } else { &a.protocol };
    let specs = names.iter().map(|n| ProtocolSpec::parse(n)).collect::<facectl::Result<Vec<_>>>()?;
    let mut run = c.descriptor("eval");
    run.input("ckpt", a.ckpt.display());
    run.input("data", a.data.display());
    run.input("protocols", names.join(","));

    let model = load_model(&a.ckpt)?;
    let clips = limit(load_clips(&a.data)?, cfg.max_clips);
    let evaluator = Evaluator::new(&model);
    let reference = match &a.reference_data {
        Some(p) => {
            run.input("reference_data", p.display());
            Some(evaluator.reference_sync(&limit(load_clips(p)?, cfg.max_clips))?)
        }
        None => None,
    };
    run.write(&resolved)?;

    let mut reports = Vec::new();
    for spec in &specs {
        log::info!("protocol {}", spec.name());
        reports.push(run_protocol(spec, &model, &evaluator, &clips, reference)?);
    }
    write_file(&c.out.join("metrics.json"), serde_json::to_string_pretty(&reports)?.as_bytes())?;
    write_file(&c.out.join("metrics.csv"), MetricsReport::to_csv(&reports)?.as_bytes())?;
    if cfg.matrix {
        let m = disentanglement_matrix(&model, &evaluator.reader(), &clips)?;
        log::info!("disentanglement min ratio {:.3}", m.min_ratio());
        write_file(&c.out.join("disentanglement.csv"), m.to_csv()?.as_bytes())?;
    }
    if cfg.heads {
        let r = &cfg.retrieval;
        let heads = HeadsReport {
            lip_retrieval_top1: lip_retrieval_accuracy(&model, &clips, r.negatives, r.min_offset, cfg.seed)?,
            eye_triplet_accuracy: eye_triplet_accuracy(&model, &clips, cfg.seed)?,
            pose_mse: pose_head_mse(&model, &clips)?,
            probe: probe_validation(&evaluator.reader(), &clips)?,
        };
        write_file(&c.out.join("heads.json"), serde_json::to_string_pretty(&heads)?.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub seed: u64,
    pub study: AblationStudy,
    /// Relative to the ablation config file.
    pub stage3_config: PathBuf,
    pub windows: Vec<usize>,
    pub full_window: usize,
    pub max_test_clips: usize,
}

#[derive(clap::Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// window_size or decorrelation; defaults to the config's study.
    #[arg(long)]
    pub study: Option<String>,
    /// Stage-2 checkpoint every variant starts from.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Training split; also the sync reference for NLSE-C.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_data: PathBuf,
}

fn slug(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect();
    s.trim_matches('-').to_string()
}

/// Overrides whose key starts with `stage3.` go to the stage-3 config.
fn split_overrides(all: Vec<String>) -> (Vec<String>, Vec<String>) {
    let (s3, own): (Vec<_>, Vec<_>) = all.into_iter().partition(|o| o.starts_with("stage3."));
    (own, s3.into_iter().map(|o| o["stage3.".len()..].to_string()).collect())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let c = &a.common;
    let _lock = OutputLock::acquire(&c.out)?;
    let (own, s3) = split_overrides(c.overrides());
    let (mut cfg, resolved): (AblateConfig, String) = load_toml(&c.config, &own)?;
    if let Some(s) = &a.study {
        cfg.study = AblationStudy::parse(s)?;
    }
    let s3_path = c.config.parent().unwrap_or(Path::new(".")).join(&cfg.stage3_config);
    let (mut base, s3_resolved): (StageConfig, String) = load_toml(&s3_path, &s3)?;
    base.seed = cfg.seed;
    base.validate()?;

    let mut run = c.descriptor("ablate");
    run.input("study", serde_json::to_value(cfg.study)?.as_str().unwrap_or_default());
    run.input("ckpt", a.ckpt.display());
    run.input("data", a.data.display());
    run.input("test_data", a.test_data.display());
    run.input("stage3_config", s3_path.display());
    run.write(&resolved)?;
    write_file(&c.out.join("resolved_stage3.toml"), s3_resolved.as_bytes())?;

    let ckpt2 = load_checkpoint(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let train = TrainData::new(load_clips(&a.data)?)?;
    let test = limit(load_clips(&a.test_data)?, cfg.max_test_clips);
    let reference = Evaluator::new(&TrainedModel::from_checkpoint(&ckpt2)?).reference_sync(&train.clips)?;
    let vs = variants(cfg.study, &cfg.windows, cfg.full_window);
    let results = run_ablation(&vs, &base, &ckpt2, &train, &test, Some(reference))?;
    for (row, ckpt) in &results {
        ckpt.save(&c.out.join("variants").join(format!("{}.fckp", slug(&row.variant))))?;
    }
    let rows: Vec<_> = results.into_iter().map(|(r, _)| r).collect();
    write_file(&c.out.join("ablation.csv"), ablation_csv(&rows)?.as_bytes())?;
    write_file(&c.out.join("ablation.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
    Ok(())
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// First driver frame shown.
    pub start: usize,
    pub frames: usize,
    pub stride: usize,
    /// Pixels between cells.
    pub gap: usize,
}

#[derive(clap::Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Split holding the appearance and driver clips.
    #[arg(long)]
    pub data: PathBuf,
    /// Clip id or index whose first frame gives the appearance.
    #[arg(long)]
    pub appearance: String,
    /// `lip:<clip>`, `eye:<clip>`, `pose:<clip>`, `exp:<clip>` or `none`; one sheet row each.
    #[arg(long = "driver", required = true)]
    pub drivers: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriverKind {
    Lip,
    Eye,
    Pose,
    Expression,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Driver {
    /// Every factor held at zero.
    Neutral,
    Factor(DriverKind, String),
}

impl Driver {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Self::Neutral);
        }
        let (kind, clip) = s.split_once(':').ok_or_else(|| Usage(format!("driver `{s}` is not factor:clip")))?;
        let kind = match kind {
            "lip" => DriverKind::Lip,
            "eye" => DriverKind::Eye,
            "pose" => DriverKind::Pose,
            "exp" | "expression" => DriverKind::Expression,
            _ => return Err(Usage(format!("unknown driver factor `{kind}`")).into()),
        };
        Ok(Self::Factor(kind, clip.to_string()))
    }
}

pub fn grid(a: &GridArgs) -> Result<()> {
    let c = &a.common;
    let _lock = OutputLock::acquire(&c.out)?;
    let (cfg, resolved): (GridConfig, String) = load_toml(&c.config, &c.overrides())?;
    if cfg.frames == 0 || cfg.stride == 0 {
        return Err(facectl::Error::Config("frames and stride must be positive".into()).into());
    }
    let drivers = a.drivers.iter().map(|d| Driver::parse(d)).collect::<Result<Vec<_>>>()?;
    let mut run = c.descriptor("grid");
    run.input("ckpt", a.ckpt.display());
    run.input("data", a.data.display());
    run.input("appearance", &a.appearance);
    run.input("drivers", a.drivers.join(","));
    run.write(&resolved)?;

    let model = load_model(&a.ckpt)?;
    let clips = load_clips(&a.data)?;
    let app_clip = find_clip(&clips, &a.appearance)?;
    let app = app_clip.frames[0].to_float();
    let times: Vec<usize> = (0..cfg.frames).map(|k| cfg.start + k * cfg.stride).collect();
    let last = *times.last().expect("frames > 0");

    let mut rows = vec![SheetRow { label: Some(app_clip.frames[0].clone()), frames: vec![] }];
    for d in &drivers {
        let mut ctl = Controls {
            appearance: (&app, &app_clip.factors[0]),
            lip: None,
            eye: None,
            pose: None,
            expression: None,
            len: last + 1,
        };
        let row = match d {
            Driver::Neutral => SheetRow::from_float(None, &model.generate(&ctl)?),
            Driver::Factor(kind, key) => {
                let clip = find_clip(&clips, key)?;
                if clip.len() <= last {
                    return Err(facectl::Error::Data(format!(
                        "driver clip {} has {} frames, the grid needs {}",
                        clip.clip_id,
                        clip.len(),
                        last + 1
                    ))
                    .into());
                }
                let frames = float_frames(clip);
                let sig = Signal { frames: &frames, factors: &clip.factors };
                match kind {
                    DriverKind::Lip => ctl.lip = Some(AudioSignal { audio: &clip.audio, factors: &clip.factors }),
                    DriverKind::Eye => ctl.eye = Some(sig),
                    DriverKind::Pose => ctl.pose = Some(sig),
                    DriverKind::Expression => ctl.expression = Some(sig),
                }
                SheetRow::from_float(Some(&frames[cfg.start]), &model.generate(&ctl)?)
            }
        };
        rows.push(SheetRow { label: row.label, frames: times.iter().map(|&t| row.frames[t].clone()).collect() });
    }
    write_file(&c.out.join("grid.png"), &compose(&rows, cfg.gap).encode_png()?)
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InterpConfig {
    pub steps: usize,
    pub frame_a: usize,
    pub frame_b: usize,
    pub gap: usize,
}

#[derive(clap::Args, Debug)]
pub struct InterpArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Clip id or index giving the identity and the start expression.
    #[arg(long)]
    pub clip_a: String,
    /// Clip id or index giving the end expression.
    #[arg(long)]
    pub clip_b: String,
    /// Replaces the config's step count.
    #[arg(long)]
    pub steps: Option<usize>,
}

pub fn interp(a: &InterpArgs) -> Result<()> {
    let c = &a.common;
    let _lock = OutputLock::acquire(&c.out)?;
    let mut overrides = c.overrides();
    overrides.extend(a.steps.map(|s| format!("steps={s}")));
    let (cfg, resolved): (InterpConfig, String) = load_toml(&c.config, &overrides)?;
    let mut run = c.descriptor("interp");
    run.input("ckpt", a.ckpt.display());
    run.input("data", a.data.display());
    run.input("clip_a", &a.clip_a);
    run.input("clip_b", &a.clip_b);
    run.write(&resolved)?;

    let model = load_model(&a.ckpt)?;
    let clips = load_clips(&a.data)?;
    let (ca, cb) = (find_clip(&clips, &a.clip_a)?, find_clip(&clips, &a.clip_b)?);
    if cfg.frame_a >= ca.len() || cfg.frame_b >= cb.len() {
        return Err(facectl::Error::Config("frame_a or frame_b is past the end of its clip".into()).into());
    }
    let path = expression_path(&model, ca, cfg.frame_a, cb, cfg.frame_b, cfg.steps)?;
    let mut row = SheetRow::from_float(None, &path);
    row.label = Some(ca.frames[cfg.frame_a].clone());
    row.frames.push(cb.frames[cfg.frame_b].clone());
    write_file(&c.out.join("interp.png"), &compose(&[row], cfg.gap).encode_png()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drivers_parse() {
        assert_eq!(Driver::parse("none").unwrap(), Driver::Neutral);
        assert_eq!(Driver::parse("exp:3").unwrap(), Driver::Factor(DriverKind::Expression, "3".into()));
        assert!(Driver::parse("mouth:3").is_err());
        assert!(Driver::parse("lip").is_err());
    }

    #[test]
    fn stage3_overrides_are_routed() {
        let (own, s3) = split_overrides(vec!["seed=4".into(), "stage3.batch_size=2".into()]);
        assert_eq!(own, vec!["seed=4"]);
        assert_eq!(s3, vec!["batch_size=2"]);
        assert_eq!(slug("+In-win"), "in-win");
        assert_eq!(slug("No dis"), "no-dis");
    }

    #[test]
    fn shipped_cli_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        load_toml::<EvalConfig>(&dir.join("eval.toml"), &[]).unwrap();
        load_toml::<AblateConfig>(&dir.join("ablate.toml"), &[]).unwrap();
        load_toml::<GridConfig>(&dir.join("grid.toml"), &[]).unwrap();
        load_toml::<InterpConfig>(&dir.join("interp.toml"), &[]).unwrap();
        load_toml::<WorldConfig>(&dir.join("world.toml"), &[]).unwrap();
        assert!(load_toml::<GridConfig>(&dir.join("grid.toml"), &["seed=1".into()]).is_err());
    }
}
