//! Stage-3 ablations: each variant retrains stage 3 from the same stage-2
//! checkpoint and is scored on the same test clips.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Checkpoint;
use crate::synthworld::Clip;
use crate::train::{run_stage, RunOptions, StageConfig, StageId, TrainData};

use super::metrics::csv_err;
use super::model::TrainedModel;
use super::protocol::{run_protocol, Evaluator, ProtocolSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationStudy {
    WindowSize,
    Decorrelation,
}

impl AblationStudy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "window_size" | "window" => Ok(Self::WindowSize),
            "decorrelation" | "decor" => Ok(Self::Decorrelation),
            _ => Err(Error::Config(format!("unknown ablation study `{s}`"))),
        }
    }
}

/// One stage-3 configuration of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub k_win: usize,
    pub decorrelation: bool,
}

pub fn variants(study: AblationStudy, windows: &[usize], full_window: usize) -> Vec<Variant> {
    let v = |name: &str, k_win, decorrelation| Variant { name: name.to_string(), k_win, decorrelation };
    match study {
        AblationStudy::WindowSize => windows.iter().map(|&k| v(&format!("window {k}"), k, true)).collect(),
        AblationStudy::Decorrelation => vec![
            v("No dis", 1, false),
            v("+In-win", full_window, false),
            v("+Decorr", 1, true),
            v("All", full_window, true),
        ],
    }
}

impl Variant {
    pub fn apply(&self, base: &StageConfig) -> Result<StageConfig> {
        if base.stage != StageId::Three {
            return Err(Error::Config("ablations vary a stage 3 config".into()));
        }
        let mut cfg = base.clone();
        let e = cfg
            .expression
            .as_mut()
            .ok_or_else(|| Error::Config("stage 3 config lacks [expression]".into()))?;
        e.k_win = self.k_win;
        e.decorrelation = self.decorrelation;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sync under fixed-expression cross-video driving, its NLSE-C, mouth LMD
/// under self-driving and expression-control MSE under cross-video driving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub k_win: usize,
    pub decorrelation: bool,
    pub sync_confidence: f64,
    pub nlsec: Option<f64>,
    pub lmd_m: f64,
    pub exp_mse: f64,
}

pub fn score_variant(
    variant: &Variant,
    ckpt3: &Checkpoint,
    test: &[Clip],
    reference_sync: Option<f64>,
) -> Result<AblationRow> {
    let model = TrainedModel::from_checkpoint(ckpt3)?;
    let eval = Evaluator::new(&model);
    let fixed = run_protocol(&ProtocolSpec::CROSS_VIDEO_FIXED_EXP, &model, &eval, test, reference_sync)?;
    let own = run_protocol(&ProtocolSpec::SELF_DRIVING, &model, &eval, test, None)?;
    let cross = run_protocol(&ProtocolSpec::CROSS_VIDEO, &model, &eval, test, None)?;
    Ok(AblationRow {
        variant: variant.name.clone(),
        k_win: variant.k_win,
        decorrelation: variant.decorrelation,
        sync_confidence: fixed.sync_confidence,
        nlsec: fixed.nlsec,
        lmd_m: own.lmd_m.expect("self-driving reports mouth LMD"),
        exp_mse: cross.exp_mse,
    })
}

/// Trains and scores every variant. `reference_sync` is the sync confidence
/// of real training frames under the stage-2 encoders.
pub fn run_ablation(
    variants: &[Variant],
    base: &StageConfig,
    ckpt2: &Checkpoint,
    train: &TrainData,
    test: &[Clip],
    reference_sync: Option<f64>,
) -> Result<Vec<(AblationRow, Checkpoint)>> {
    variants
        .iter()
        .map(|v| {
            log::info!("ablation variant {}", v.name);
            let cfg = v.apply(base)?;
            let ckpt = run_stage(&cfg, train, Some(ckpt2), &RunOptions::default())?.checkpoint;
            Ok((score_variant(v, &ckpt, test, reference_sync)?, ckpt))
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "k_win", "decorrelation", "sync_confidence", "nlsec", "lmd_m", "exp_mse"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.k_win.to_string(),
            r.decorrelation.to_string(),
            r.sync_confidence.to_string(),
            r.nlsec.map(|v| v.to_string()).unwrap_or_default(),
            r.lmd_m.to_string(),
            r.exp_mse.to_string(),
        ])
        .map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
        .map_err(|e| Error::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_layouts() {
        let w = variants(AblationStudy::WindowSize, &[7, 13, 25], 13);
        assert_eq!(w.iter().map(|v| v.k_win).collect::<Vec<_>>(), vec![7, 13, 25]);
        let d = variants(AblationStudy::Decorrelation, &[], 13);
        let names: Vec<&str> = d.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["No dis", "+In-win", "+Decorr", "All"]);
        assert_eq!((d[0].k_win, d[0].decorrelation), (1, false));
        assert_eq!((d[3].k_win, d[3].decorrelation), (13, true));
        assert!(AblationStudy::parse("nope").is_err());
    }

    #[test]
    fn variants_only_touch_the_expression_section() {
        let text = crate::train::SHIPPED_CONFIGS.iter().find(|(t, _)| *t == "3").unwrap().1;
        let base = StageConfig::from_toml_str(text).unwrap();
        let v = &variants(AblationStudy::Decorrelation, &[], 13)[0];
        let cfg = v.apply(&base).unwrap();
        let e = cfg.expression.as_ref().unwrap();
        assert_eq!((e.k_win, e.decorrelation), (1, false));
        let mut back = cfg.clone();
        back.expression = base.expression.clone();
        assert_eq!(back, base);
        let row = AblationRow {
            variant: "All".into(),
            k_win: 13,
            decorrelation: true,
            sync_confidence: 0.5,
            nlsec: None,
            lmd_m: 1.0,
            exp_mse: 0.1,
        };
        assert_eq!(ablation_csv(&[row]).unwrap().lines().count(), 2);
    }
}
