//! Stage configuration files and `key=value` overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augment::{ColorJitter, WindowAugment};
use crate::error::{Error, Result};
use crate::nets::{prefix, AdamConfig, NetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    #[serde(rename = "probe")]
    Probe,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2-lip")]
    Lip,
    #[serde(rename = "2-eye")]
    Eye,
    #[serde(rename = "2-pose")]
    Pose,
    #[serde(rename = "3")]
    Three,
}

impl StageId {
    pub const ALL: [StageId; 6] = [
        StageId::Probe,
        StageId::One,
        StageId::Lip,
        StageId::Eye,
        StageId::Pose,
        StageId::Three,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            StageId::Probe => "probe",
            StageId::One => "1",
            StageId::Lip => "2-lip",
            StageId::Eye => "2-eye",
            StageId::Pose => "2-pose",
            StageId::Three => "3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    /// Networks updated by this stage. Everything else is bound frozen.
    pub fn trainable(self) -> &'static [&'static str] {
        match self {
            StageId::Probe => &[prefix::PROBE],
            StageId::One => &[prefix::E_APP, prefix::E_MOT, prefix::G0, prefix::DISC0],
            StageId::Lip => &[prefix::E_LIP, prefix::E_AUD],
            StageId::Eye => &[prefix::E_EYE],
            StageId::Pose => &[prefix::E_POSE],
            StageId::Three => &[prefix::E_EXP, prefix::G, prefix::DISC],
        }
    }

    /// Stages whose parameters this stage consumes.
    pub fn requires(self) -> &'static [StageId] {
        match self {
            StageId::Probe => &[],
            StageId::One => &[StageId::Probe],
            StageId::Lip | StageId::Eye | StageId::Pose => &[StageId::Probe, StageId::One],
            StageId::Three => &[
                StageId::Probe,
                StageId::One,
                StageId::Lip,
                StageId::Eye,
                StageId::Pose,
            ],
        }
    }

    /// Loss names whose weights the config must provide.
    pub fn loss_names(self) -> &'static [&'static str] {
        match self {
            StageId::Probe => &["keypoints", "readout"],
            StageId::One => &["recon", "adv", "mot"],
            StageId::Lip => &["audio_to_video", "video_to_audio"],
            StageId::Eye => &["eye"],
            StageId::Pose => &["pose"],
            StageId::Three => &["vgg", "adv", "fm", "con", "decor"],
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Decay {
    /// Multiplier applied at each interval boundary.
    pub factor: f64,
    /// Training is split into this many equal intervals.
    pub intervals: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub negatives: usize,
    pub min_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionConfig {
    /// Frames averaged per expression feature; 1 disables in-window averaging.
    pub k_win: usize,
    pub bank_capacity: usize,
    /// Whether the bank decorrelation loss is applied.
    pub decorrelation: bool,
    /// Fraction of steps after which the expression encoder is frozen.
    pub freeze_fraction: f64,
    /// Augmented copies of each frame precomputed for window sampling.
    pub window_variants: usize,
    pub window_augment: WindowAugment,
    pub perceptual_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: StageId,
    pub seed: u64,
    pub epochs: f64,
    pub batch_size: usize,
    /// Caps the step count derived from `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    /// Checkpoint of the earlier stages; required for every stage after the probe.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_checkpoint: Option<PathBuf>,
    /// Intermediate checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Learning rate per trained network.
    pub lr: BTreeMap<String, f64>,
    pub decay: Decay,
    pub adam: AdamConfig,
    pub weights: BTreeMap<String, f64>,
    /// Photometric augmentation of motion-branch inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<ColorJitter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrastive: Option<ContrastiveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<ExpressionConfig>,
    /// Architecture; only the probe stage, which creates the networks, sets it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net: Option<NetConfig>,
}

fn require<'a, T>(v: &'a Option<T>, stage: StageId, what: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("stage {stage} needs a [{what}] section")))
}

impl StageConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stage;
        if !(self.epochs.is_finite() && self.epochs > 0.0) {
            return Err(Error::Config(format!("epochs must be positive, got {}", self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive when set".into()));
        }
        let mut want: Vec<&str> = s.trainable().to_vec();
        want.sort_unstable();
        let have: Vec<&str> = self.lr.keys().map(String::as_str).collect();
        if have != want {
            return Err(Error::Config(format!(
                "stage {s} needs learning rates for exactly {want:?}, got {have:?}"
            )));
        }
        if let Some((k, v)) = self.lr.iter().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Config(format!("learning rate {k} must be positive, got {v}")));
        }
        if !(self.decay.factor > 0.0 && self.decay.factor <= 1.0) || self.decay.intervals == 0 {
            return Err(Error::Config("decay needs factor in (0, 1] and intervals >= 1".into()));
        }
        for name in s.loss_names() {
            match self.weights.get(*name) {
                Some(w) if w.is_finite() && *w >= 0.0 => {}
                Some(w) => return Err(Error::Config(format!("weight {name} must be >= 0, got {w}"))),
                None => return Err(Error::Config(format!("stage {s} needs weight `{name}`"))),
            }
        }
        if let Some(extra) = self.weights.keys().find(|k| !s.loss_names().contains(&k.as_str())) {
            return Err(Error::Config(format!("stage {s} has no loss named `{extra}`")));
        }
        match s {
            StageId::Probe => {
                require(&self.net, s, "net")?.validate()?;
                require(&self.augment, s, "augment")?.validate()?;
            }
            StageId::One => {
                require(&self.augment, s, "augment")?.validate()?;
            }
            StageId::Lip => {
                let c = require(&self.contrastive, s, "contrastive")?;
                if c.negatives == 0 || c.min_offset == 0 {
                    return Err(Error::Config("negatives and min_offset must be positive".into()));
                }
            }
            StageId::Eye | StageId::Pose => {}
            StageId::Three => {
                let e = require(&self.expression, s, "expression")?;
                if e.k_win == 0 || e.bank_capacity < crate::losses::MIN_CORRELATION_ROWS {
                    return Err(Error::Config(format!(
                        "k_win must be positive and bank_capacity at least {}",
                        crate::losses::MIN_CORRELATION_ROWS
                    )));
                }
                if !(0.0..=1.0).contains(&e.freeze_fraction) {
                    return Err(Error::Config("freeze_fraction must lie in [0, 1]".into()));
                }
                if e.window_variants == 0 {
                    return Err(Error::Config("window_variants must be positive".into()));
                }
                e.window_augment.jitter.validate()?;
            }
        }
        if s != StageId::Probe && self.net.is_some() {
            return Err(Error::Config(
                "only the probe stage defines [net]; later stages take it from their input checkpoint".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_for(&self, net: &str) -> f64 {
        self.lr.get(net).copied().unwrap_or(0.0)
    }

    pub fn weight(&self, loss: &str) -> f64 {
        self.weights.get(loss).copied().unwrap_or(0.0)
    }

    pub fn expression(&self) -> Result<&ExpressionConfig> {
        require(&self.expression, self.stage, "expression")
    }

    pub fn contrastive(&self) -> Result<&ContrastiveConfig> {
        require(&self.contrastive, self.stage, "contrastive")
    }

    pub fn augment(&self) -> Result<&ColorJitter> {
        require(&self.augment, self.stage, "augment")
    }

    /// Steps for a training set of `samples` items.
    pub fn total_steps(&self, samples: usize) -> u64 {
        let per_epoch = samples as f64 / self.batch_size as f64;
        let steps = (self.epochs * per_epoch).ceil().max(1.0) as u64;
        self.max_steps.map_or(steps, |m| steps.min(m))
    }

    /// Learning-rate multiplier at `step` of `total`.
    pub fn lr_scale(&self, step: u64, total: u64) -> f64 {
        let interval = total.div_ceil(self.decay.intervals).max(1);
        self.decay.factor.powi((step / interval) as i32)
    }
}

/// Parses `a.b.c=value` pairs, the value as a TOML literal when it parses as one
/// and as a string otherwise.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

pub fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path crosses non-table `{p}`")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Reads a TOML file, applies overrides and deserializes it. Also returns the
/// resolved document for snapshots.
pub fn load_toml<T: DeserializeOwned>(path: &Path, overrides: &[String]) -> Result<(T, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    resolve_toml(&text, overrides)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn resolve_toml<T: DeserializeOwned>(text: &str, overrides: &[String]) -> Result<(T, String)> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for o in overrides {
        let (path, value) = parse_override(o)?;
        apply_override(&mut table, &path, value)?;
    }
    let resolved = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    let value = T::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))?;
    Ok((value, resolved))
}
