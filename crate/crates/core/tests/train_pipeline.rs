use std::sync::OnceLock;

use facectl::nets::{prefix, Checkpoint, NetConfig};
use facectl::synthworld::{generate_split, Split, WorldConfig};
use facectl::train::{
    resolve_toml, run_stage, RunOptions, Session, StageConfig, StageId, TrainData, SHIPPED_CONFIGS,
};

fn data() -> &'static TrainData {
    static DATA: OnceLock<TrainData> = OnceLock::new();
    DATA.get_or_init(|| {
        let world = WorldConfig {
            seed: 3,
            identities: 2,
            clips_per_identity: 2,
            clip_length: 16,
            ..WorldConfig::default()
        };
        TrainData::new(generate_split(&world, Split::Train).unwrap()).unwrap()
    })
}

fn config(tag: &str, extra: &[&str]) -> StageConfig {
    let text = SHIPPED_CONFIGS.iter().find(|(t, _)| *t == tag).unwrap().1;
    let mut overrides = vec!["batch_size=4".to_string(), "max_steps=2".to_string()];
    if tag == "3" {
        overrides.extend(
            [
                "expression.k_win=3",
                "expression.window_variants=2",
                "expression.bank_capacity=16",
            ]
            .map(String::from),
        );
    }
    overrides.extend(extra.iter().map(|s| s.to_string()));
    let (mut cfg, _): (StageConfig, _) = resolve_toml(text, &overrides).unwrap();
    if cfg.stage == StageId::Probe {
        cfg.net = Some(NetConfig::small(64));
    }
    cfg.validate().unwrap();
    cfg
}

fn run(cfg: &StageConfig, input: Option<&Checkpoint>) -> Checkpoint {
    run_stage(cfg, data(), input, &RunOptions::default()).unwrap().checkpoint
}

/// Probe, stage 1 and all stage-2 heads at two steps each.
fn stage2_checkpoint() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let mut c = run(&config("probe", &[]), None);
        c = run(&config("1", &[]), Some(&c));
        for tag in ["2-lip", "2-eye", "2-pose"] {
            c = run(&config(tag, &[]), Some(&c));
        }
        c
    })
}

fn digest(ckpt: &Checkpoint, net: &str) -> String {
    Session::from_checkpoint(ckpt).unwrap().store.digest(net).unwrap()
}

#[test]
fn one_step_stage1_writes_tagged_checkpoint_with_finite_losses() {
    let probe = run(&config("probe", &["max_steps=1"]), None);
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage(
        &config("1", &["max_steps=1"]),
        data(),
        Some(&probe),
        &RunOptions { out_dir: Some(dir.path()), resume: None },
    )
    .unwrap();
    let saved = Checkpoint::load(out.path.as_ref().unwrap()).unwrap();
    assert_eq!(saved.stage, "1");
    assert_eq!(saved.step, 1);
    assert_eq!(out.log.len(), 1);
    for e in &out.log[0].report.entries {
        assert!(e.value.is_finite(), "{} = {}", e.name, e.value);
    }
    let csv = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn stages_require_their_predecessors() {
    let probe = run(&config("probe", &["max_steps=1"]), None);
    let err = run_stage(&config("2-lip", &[]), data(), Some(&probe), &RunOptions::default());
    assert!(err.is_err());
    let err = run_stage(&config("1", &[]), data(), None, &RunOptions::default());
    assert!(err.is_err());
}

#[test]
fn earlier_networks_are_untouched_by_later_stages() {
    let c2 = stage2_checkpoint();
    let c3 = run(&config("3", &["expression.freeze_fraction=1.0"]), Some(c2));
    for net in [prefix::E_APP, prefix::E_MOT, prefix::G0, prefix::E_LIP, prefix::E_AUD, prefix::E_EYE, prefix::E_POSE, prefix::PROBE] {
        assert_eq!(digest(c2, net), digest(&c3, net), "{net} changed in stage 3");
    }
    for net in [prefix::E_EXP, prefix::G, prefix::DISC] {
        assert_ne!(digest(c2, net), digest(&c3, net), "{net} did not train");
    }
}

#[test]
fn resumed_stage1_matches_uninterrupted_run() {
    let probe = run(&config("probe", &["max_steps=1"]), None);
    let cfg = config("1", &["max_steps=4", "checkpoint_every=2"]);
    let dir = tempfile::tempdir().unwrap();
    let full = run_stage(&cfg, data(), Some(&probe), &RunOptions { out_dir: Some(dir.path()), resume: None }).unwrap();
    let mid = Checkpoint::load(&dir.path().join("ckpt-2.fckp")).unwrap();

    let dir2 = tempfile::tempdir().unwrap();
    let resumed = run_stage(&cfg, data(), Some(&probe), &RunOptions { out_dir: Some(dir2.path()), resume: Some(&mid) }).unwrap();
    assert_eq!(resumed.log.len(), 2);
    for (a, b) in full.log[2..].iter().zip(&resumed.log) {
        assert_eq!(a.step, b.step);
        for (x, y) in a.report.entries.iter().zip(&b.report.entries) {
            assert_eq!(x.value.to_bits(), y.value.to_bits(), "{} at step {}", x.name, a.step);
        }
    }
    assert_eq!(full.checkpoint.to_bytes().unwrap(), resumed.checkpoint.to_bytes().unwrap());
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let a = run(&config("probe", &["max_steps=3"]), None);
    let b = run(&config("probe", &["max_steps=3"]), None);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let c = run(&config("probe", &["max_steps=3", "seed=1"]), None);
    assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
}

#[test]
fn bank_fills_monotonically_and_expression_encoder_freezes() {
    let cfg = config("3", &["max_steps=6", "checkpoint_every=1", "expression.freeze_fraction=0.5"]);
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage(&cfg, data(), Some(stage2_checkpoint()), &RunOptions { out_dir: Some(dir.path()), resume: None }).unwrap();
    let mut ckpts: Vec<Checkpoint> = (1..6)
        .map(|s| Checkpoint::load(&dir.path().join(format!("ckpt-{s}.fckp"))).unwrap())
        .collect();
    ckpts.push(out.checkpoint);

    let mut last = 0;
    for (i, c) in ckpts.iter().enumerate() {
        let steps = i as u64 + 1;
        let (shape, _) = c.f32_values("bank/exp").unwrap();
        let rows = shape[0];
        assert_eq!(rows as u64, (steps * 4).min(16));
        assert!(rows >= last);
        last = rows;
        assert_eq!(c.meta["bank/exp/pushed"].as_u64(), Some(steps * 4));
    }

    // Freeze point floor(0.5 * 6) = 3: steps 0..3 train E_exp.
    let exp: Vec<String> = ckpts.iter().map(|c| digest(c, prefix::E_EXP)).collect();
    assert_ne!(exp[1], exp[2]);
    assert!(exp[2..].iter().all(|d| *d == exp[2]));
    let g: Vec<String> = ckpts.iter().map(|c| digest(c, prefix::G)).collect();
    assert_ne!(g[4], g[5]);
}

#[test]
fn decorrelation_flag_only_changes_the_weight() {
    let c2 = stage2_checkpoint();
    let on = run_stage(&config("3", &["max_steps=4", "expression.freeze_fraction=1.0"]), data(), Some(c2), &RunOptions::default()).unwrap();
    let off = run_stage(
        &config("3", &["max_steps=4", "expression.freeze_fraction=1.0", "expression.decorrelation=false"]),
        data(),
        Some(c2),
        &RunOptions::default(),
    )
    .unwrap();
    // Four rows per step: the bank holds enough samples from step 1 on.
    let decor = |r: &facectl::train::LogRow| r.report.entries.iter().find(|e| e.name == "decor").unwrap().clone();
    assert_eq!(decor(&on.log[0]).value, 0.0);
    assert!(decor(&on.log[1]).value > 0.0);
    assert_eq!(decor(&on.log[1]).weight, 1.0);
    assert_eq!(decor(&off.log[1]).weight, 0.0);
    assert_eq!(on.log[0].report.total.to_bits(), off.log[0].report.total.to_bits());
}

#[test]
fn resumed_stage3_restores_banks_and_freeze_state() {
    let cfg = config("3", &["max_steps=5", "checkpoint_every=3", "expression.freeze_fraction=0.5"]);
    let c2 = stage2_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let full = run_stage(&cfg, data(), Some(c2), &RunOptions { out_dir: Some(dir.path()), resume: None }).unwrap();
    let mid = Checkpoint::load(&dir.path().join("ckpt-3.fckp")).unwrap();
    let resumed = run_stage(&cfg, data(), Some(c2), &RunOptions { out_dir: None, resume: Some(&mid) }).unwrap();
    for (a, b) in full.log[3..].iter().zip(&resumed.log) {
        assert_eq!(a.report, b.report, "step {}", a.step);
    }
    assert_eq!(full.checkpoint.to_bytes().unwrap(), resumed.checkpoint.to_bytes().unwrap());
}
