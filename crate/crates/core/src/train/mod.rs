//! Progressive training: probe pretraining, then stage 1 (appearance/motion),
//! the three stage-2 heads, and stage 3 (expression and final generator).
//!
//! Each stage starts from the checkpoint of the stages it requires, updates only
//! its own networks and writes a checkpoint tagged with its id. Batches and
//! augmentations are drawn from seeded streams keyed by step, so a run resumed
//! from an intermediate checkpoint continues exactly as the uninterrupted run.

mod config;
mod data;
mod trainlog;
mod probe;
mod stage1;
mod stage2;
mod stage3;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::DType;
#[cfg(test)]
use candle_core::Tensor;

pub use config::{
    apply_override, load_toml, parse_override, resolve_toml, ContrastiveConfig, Decay,
    ExpressionConfig, StageConfig, StageId,
};
pub use data::{encode_in_chunks, stream_rng, stream_seed, TrainData};
pub use trainlog::{LogRow, TrainLog};
pub use stage3::window_feature_cache;

use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::nets::{Adam, Checkpoint, NetConfig, Nets, ParamStore};

/// The stage configuration files shipped in `configs/`, by stage tag.
pub const SHIPPED_CONFIGS: [(&str, &str); 6] = [
    ("probe", include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/probe.toml"))),
    ("1", include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/stage1.toml"))),
    ("2-lip", include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/stage2-lip.toml"))),
    ("2-eye", include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/stage2-eye.toml"))),
    ("2-pose", include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/stage2-pose.toml"))),
    ("3", include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/stage3.toml"))),
];

pub const META_NET: &str = "net_config";
pub const META_TRAINED: &str = "trained_stages";
pub const META_STAGE_CONFIG: &str = "stage_config";
pub const META_COMPLETE: &str = "complete";
pub const META_DATA: &str = "data_digest";

/// Pins the matrix kernels to one thread so reductions happen in a fixed order,
/// and returns the seed every stream derives from.
pub fn set_global_determinism(seed: u64) -> u64 {
    if std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    seed
}

/// Parameters of every network plus which stages have been trained.
pub struct Session {
    pub store: ParamStore,
    pub net_cfg: NetConfig,
    pub trained: BTreeSet<StageId>,
}

impl Session {
    pub fn new(net_cfg: &NetConfig) -> Result<Self> {
        net_cfg.validate()?;
        let mut store = ParamStore::new(net_cfg.init_seed, DType::F32);
        Nets::build(&mut store, net_cfg, |_| false)?;
        Ok(Self {
            store,
            net_cfg: net_cfg.clone(),
            trained: BTreeSet::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let net_cfg: NetConfig = serde_json::from_value(
            ckpt.meta
                .get(META_NET)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {META_NET}")))?,
        )?;
        ckpt.check_hash(&net_cfg.hash())?;
        let mut s = Self::new(&net_cfg)?;
        let n = s.store.import(ckpt)?;
        if n != s.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {n} of {} parameters",
                s.store.len()
            )));
        }
        s.trained = trained_stages(ckpt)?;
        Ok(s)
    }

    /// Networks with only `trainable` prefixes receiving gradients.
    pub fn nets(&mut self, trainable: &[&str]) -> Result<Nets> {
        Nets::build(&mut self.store, &self.net_cfg, |p| trainable.contains(&p))
    }

    pub fn checkpoint(&self, stage: StageId, step: u64) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(stage.tag(), &self.net_cfg.hash(), step);
        self.store.export(&mut c)?;
        c.meta.insert(META_NET.into(), serde_json::to_value(&self.net_cfg)?);
        c.meta.insert(
            META_TRAINED.into(),
            self.trained.iter().map(|s| s.tag()).collect::<Vec<_>>().into(),
        );
        Ok(c)
    }

    pub fn require(&self, stage: StageId) -> Result<()> {
        let missing: Vec<&str> = stage
            .requires()
            .iter()
            .filter(|s| !self.trained.contains(s))
            .map(|s| s.tag())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "stage {stage} needs a checkpoint with trained stages {missing:?}"
            )))
        }
    }
}

pub fn trained_stages(ckpt: &Checkpoint) -> Result<BTreeSet<StageId>> {
    let Some(v) = ckpt.meta.get(META_TRAINED) else {
        return Ok(BTreeSet::new());
    };
    let list = v
        .as_array()
        .ok_or_else(|| Error::Checkpoint(format!("{META_TRAINED} is not a list")))?;
    list.iter()
        .map(|s| {
            s.as_str()
                .ok_or_else(|| Error::Checkpoint(format!("bad entry in {META_TRAINED}")))
                .and_then(StageId::parse)
        })
        .collect()
}

/// Fails if any parameter outside `trainable` received a gradient.
pub fn assert_frozen(store: &ParamStore, grads: &GradStore, trainable: &[&str]) -> Result<()> {
    let allowed: BTreeSet<String> = store.names_under(trainable).into_iter().collect();
    for name in store.names() {
        if allowed.contains(name) {
            continue;
        }
        if grads.get(store.get(name).unwrap().as_tensor()).is_some() {
            return Err(Error::Validation(format!(
                "gradient reached frozen parameter {name}"
            )));
        }
    }
    Ok(())
}

/// One optimizer per trained network, so each gets its own learning rate.
pub(crate) struct Optimizers {
    pub opts: Vec<(String, Adam)>,
}

impl Optimizers {
    pub fn new(store: &ParamStore, cfg: &StageConfig, nets: &[&str]) -> Result<Self> {
        let opts = nets
            .iter()
            .map(|n| {
                let names = store.names_under(&[n]);
                Ok((n.to_string(), Adam::new(n, store, names, cfg.adam.clone())?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { opts })
    }

    /// Steps the optimizers of `nets` with `grads`.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        cfg: &StageConfig,
        scale: f64,
        nets: &[&str],
    ) -> Result<()> {
        for (n, opt) in self.opts.iter_mut() {
            if nets.contains(&n.as_str()) {
                opt.step(store, grads, cfg.lr_for(n) * scale)?;
            }
        }
        Ok(())
    }

    pub fn export(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for (_, o) in &self.opts {
            o.export(ckpt)?;
        }
        Ok(())
    }

    pub fn import(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (_, o) in self.opts.iter_mut() {
            o.import(ckpt, &candle_core::Device::Cpu)?;
        }
        Ok(())
    }
}

/// Work done by one training stage.
pub(crate) trait StageRunner {
    fn step(&mut self, store: &mut ParamStore, step: u64, total: u64) -> Result<LossReport>;
    fn export_state(&self, ckpt: &mut Checkpoint) -> Result<()>;
    fn import_state(&mut self, ckpt: &Checkpoint) -> Result<()>;
}

/// Where a run writes and what it resumes from.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Receives `train_log.csv`, intermediate `ckpt-<step>.fckp` files and
    /// the final `stage-<id>.fckp`.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<&'a Checkpoint>,
}

pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Path of the final checkpoint when an output directory was given.
    pub path: Option<PathBuf>,
}

pub fn final_checkpoint_name(stage: StageId) -> String {
    format!("stage-{}.fckp", stage.tag())
}

/// Kept as a string: parsed JSON floats do not always round-trip.
fn config_json(cfg: &StageConfig) -> Result<serde_json::Value> {
    // the input path is where the parent came from, not part of the recipe
    let mut c = cfg.clone();
    c.input_checkpoint = None;
    Ok(serde_json::to_string(&c)?.into())
}

/// Runs one stage. Every stage but the probe needs `input`, a checkpoint
/// holding the stages it requires.
pub fn run_stage(
    cfg: &StageConfig,
    data: &TrainData,
    input: Option<&Checkpoint>,
    opts: &RunOptions,
) -> Result<RunOutput> {
    cfg.validate()?;
    let stage = cfg.stage;
    let mut sess = match (stage, input) {
        (StageId::Probe, _) => Session::new(cfg.net.as_ref().expect("validated"))?,
        (_, Some(ckpt)) => Session::from_checkpoint(ckpt)?,
        (_, None) => {
            return Err(Error::Checkpoint(format!(
                "stage {stage} needs an input checkpoint"
            )))
        }
    };
    sess.require(stage)?;
    let cfg_json = config_json(cfg)?;

    let mut start = 0;
    if let Some(r) = opts.resume {
        if r.stage != stage.tag() {
            return Err(Error::Checkpoint(format!(
                "cannot resume stage {stage} from a stage {} checkpoint",
                r.stage
            )));
        }
        if r.meta.get(META_STAGE_CONFIG) != Some(&cfg_json) {
            return Err(Error::Checkpoint("resume checkpoint was written under a different config".into()));
        }
        if r.meta.get(META_DATA).and_then(|v| v.as_str()) != Some(data.digest()) {
            return Err(Error::Checkpoint("resume checkpoint was written for different data".into()));
        }
        r.check_hash(&sess.net_cfg.hash())?;
        sess.store.import(r)?;
        start = r.step;
    }

    let mut runner: Box<dyn StageRunner> = match stage {
        StageId::Probe => Box::new(probe::ProbeRunner::new(cfg, data, &mut sess)?),
        StageId::One => Box::new(stage1::Stage1Runner::new(cfg, data, &mut sess)?),
        StageId::Lip => Box::new(stage2::LipRunner::new(cfg, data, &mut sess)?),
        StageId::Eye => Box::new(stage2::EyeRunner::new(cfg, data, &mut sess)?),
        StageId::Pose => Box::new(stage2::PoseRunner::new(cfg, data, &mut sess)?),
        StageId::Three => Box::new(stage3::Stage3Runner::new(cfg, data, &mut sess)?),
    };
    if let Some(r) = opts.resume {
        runner.import_state(r)?;
    }

    let total = cfg.total_steps(data.len());
    if start > total {
        return Err(Error::Checkpoint(format!(
            "resume step {start} is past the run's {total} steps"
        )));
    }
    let mut log = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            TrainLog::open(&dir.join("train_log.csv"), start)?
        }
        None => TrainLog::in_memory(),
    };

    let make_ckpt = |sess: &Session, runner: &dyn StageRunner, step: u64, complete: bool| -> Result<Checkpoint> {
        let mut c = sess.checkpoint(stage, step)?;
        runner.export_state(&mut c)?;
        c.meta.insert(META_STAGE_CONFIG.into(), cfg_json.clone());
        c.meta.insert(META_DATA.into(), data.digest().into());
        c.meta.insert(META_COMPLETE.into(), complete.into());
        Ok(c)
    };

    for step in start..total {
        let report = runner.step(&mut sess.store, step, total)?;
        log.push(LogRow {
            step,
            lr_scale: cfg.lr_scale(step, total),
            report,
        })?;
        let done = step + 1;
        if let Some(dir) = opts.out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
                make_ckpt(&sess, runner.as_ref(), done, false)?
                    .save(&dir.join(format!("ckpt-{done}.fckp")))?;
            }
        }
    }

    sess.trained.insert(stage);
    let ckpt = make_ckpt(&sess, runner.as_ref(), total, true)?;
    let path = match opts.out_dir {
        Some(dir) => {
            let p = dir.join(final_checkpoint_name(stage));
            ckpt.save(&p)?;
            Some(p)
        }
        None => None,
    };
    Ok(RunOutput {
        checkpoint: ckpt,
        log: log.into_rows(),
        path,
    })
}

pub fn run_probe(cfg: &StageConfig, data: &TrainData) -> Result<Checkpoint> {
    expect_stage(cfg, StageId::Probe)?;
    Ok(run_stage(cfg, data, None, &RunOptions::default())?.checkpoint)
}

pub fn run_stage1(cfg: &StageConfig, data: &TrainData, probe: &Checkpoint) -> Result<Checkpoint> {
    expect_stage(cfg, StageId::One)?;
    Ok(run_stage(cfg, data, Some(probe), &RunOptions::default())?.checkpoint)
}

/// Runs the given stage-2 heads in order, each starting from the previous result.
pub fn run_stage2(cfgs: &[StageConfig], data: &TrainData, ckpt1: &Checkpoint) -> Result<Checkpoint> {
    let mut ckpt = ckpt1.clone();
    for cfg in cfgs {
        if !matches!(cfg.stage, StageId::Lip | StageId::Eye | StageId::Pose) {
            return Err(Error::Config(format!("stage {} is not a stage-2 head", cfg.stage)));
        }
        ckpt = run_stage(cfg, data, Some(&ckpt), &RunOptions::default())?.checkpoint;
    }
    Ok(ckpt)
}

pub fn run_stage3(cfg: &StageConfig, data: &TrainData, ckpt2: &Checkpoint) -> Result<Checkpoint> {
    expect_stage(cfg, StageId::Three)?;
    Ok(run_stage(cfg, data, Some(ckpt2), &RunOptions::default())?.checkpoint)
}

fn expect_stage(cfg: &StageConfig, want: StageId) -> Result<()> {
    if cfg.stage != want {
        return Err(Error::Config(format!(
            "expected a stage {want} config, got stage {}",
            cfg.stage
        )));
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
