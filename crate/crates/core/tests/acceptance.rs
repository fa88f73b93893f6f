//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The default profile trains every stage on a small world with capped step
//! counts so the whole run fits in a test session on one CPU. Set
//! `FACECTL_ACCEPTANCE_PROFILE=full` to train with the shipped configs on the
//! default world instead (hours on a CPU).
//!
//! Criteria 1-5 and 11 are exact properties and fail the run. Criteria 6-10
//! measure training outcomes; they are reported, and fail the run only when
//! `FACECTL_ACCEPTANCE_STRICT=1`.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use facectl::eval::{
    disentanglement_matrix, eye_triplet_accuracy, lip_retrieval_accuracy, nlsec, pose_head_mse, run_protocol,
    score_variant, Evaluator, ProtocolSpec, TrainedModel, Variant,
};
use facectl::losses::gradcheck::check_gradient;
use facectl::losses::{
    bank_correlation, consistency_loss, decorrelation_loss, eye_contrastive_loss, infonce, motion_recon_loss,
    pose_loss, MemoryBank, PerceptualPyramid,
};
use facectl::nets::{Adam, AdamConfig, Checkpoint, Init, NetConfig, Nets, ParamStore};
use facectl::synthworld::{generate_split, Clip, Split, WorldConfig};
use facectl::train::{resolve_toml, run_stage, RunOptions, StageConfig, TrainData, SHIPPED_CONFIGS};

type Outcome = Result<(bool, String), String>;

struct Profile {
    name: &'static str,
    world: WorldConfig,
    /// Test clips scored by the trained-model criteria.
    test_clips: usize,
    /// Per-stage overrides on top of the shipped configs.
    overrides: Vec<(&'static str, Vec<String>)>,
}

impl Profile {
    fn from_env() -> Self {
        match std::env::var("FACECTL_ACCEPTANCE_PROFILE").as_deref() {
            Ok("full") => Profile { name: "full", world: WorldConfig::default(), test_clips: 0, overrides: vec![] },
            _ => {
                let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
                Profile {
                    name: "reduced",
                    world: WorldConfig { seed: 0, identities: 16, clips_per_identity: 2, clip_length: 32, ..Default::default() },
                    test_clips: 12,
                    // max_steps only caps the epoch count, so epochs is raised where the cap must bind
                    overrides: vec![
                        ("probe", s(&["epochs=1000", "max_steps=600"])),
                        ("1", s(&["max_steps=400"])),
                        ("2-lip", s(&["epochs=1000", "max_steps=1500"])),
                        ("2-eye", s(&["epochs=1000", "max_steps=1000"])),
                        ("2-pose", s(&["epochs=1000", "max_steps=1000"])),
                        ("3", s(&["max_steps=200", "batch_size=8"])),
                    ],
                }
            }
        }
    }

    fn config(&self, tag: &str, extra: &[String]) -> StageConfig {
        let text = SHIPPED_CONFIGS.iter().find(|(t, _)| *t == tag).expect("shipped config").1;
        let mut o: Vec<String> = self.overrides.iter().filter(|(t, _)| *t == tag).flat_map(|(_, v)| v.clone()).collect();
        o.extend_from_slice(extra);
        let (cfg, _): (StageConfig, String) = resolve_toml(text, &o).expect("config resolves");
        cfg.validate().expect("valid config");
        cfg
    }
}

fn train(cfg: &StageConfig, data: &TrainData, input: Option<&Checkpoint>) -> Result<Checkpoint, String> {
    let t = Instant::now();
    let out = run_stage(cfg, data, input, &RunOptions::default()).map_err(|e| e.to_string())?;
    eprintln!("  stage {} trained: {} steps in {:.0?}", cfg.stage, out.checkpoint.step, t.elapsed());
    Ok(out.checkpoint)
}

/// Stage 2 from scratch: probe, stage 1, then the three heads.
fn train_to_stage2(p: &Profile, data: &TrainData, extra: &[String]) -> Result<Checkpoint, String> {
    let mut ckpt = train(&p.config("probe", extra), data, None)?;
    for tag in ["1", "2-lip", "2-eye", "2-pose"] {
        ckpt = train(&p.config(tag, extra), data, Some(&ckpt))?;
    }
    Ok(ckpt)
}

fn decimals(printed: &str) -> i32 {
    printed.split_once('.').map_or(0, |(_, f)| f.len() as i32)
}

fn round_to(v: f64, d: i32) -> f64 {
    let s = 10f64.powi(d);
    (v * s).round() / s
}

fn c1_nlsec() -> Outcome {
    // (generated, reference, printed)
    let rows = [
        (9.23, 7.80, "0.183"),
        (2.03, 7.35, "0.724"),
        (8.21, 7.35, "0.117"),
        (7.26, 7.35, "0.012"),
        (4.75, 1.76, "1.699"),
        (5.34, 1.76, "2.03"),
    ];
    let mut worst: f64 = 0.0;
    let mut notes = vec![];
    for (g, t, printed) in rows {
        let raw = nlsec(g, t).map_err(|e| e.to_string())?;
        let want: f64 = printed.parse().unwrap();
        // the table prints some values with fewer decimals; compare at that precision
        let err = (round_to(raw, decimals(printed)) - want).abs();
        if (raw - want).abs() > 2e-3 {
            notes.push(format!("({g},{t}) raw {raw:.4} vs {printed}"));
        }
        worst = worst.max(err);
    }
    Ok((worst <= 2e-3, format!("max error {worst:.1e} at printed precision; {}", notes.join(", "))))
}

fn t2(rows: &[&[f64]]) -> Tensor {
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn c2_closed_forms() -> Outcome {
    let e = |x: facectl::Result<Tensor>| x.map(|t| scalar(&t)).map_err(|e| e.to_string());
    let a = t2(&[&[0.3, -1.2, 0.7]]);
    let negs = Tensor::stack(&vec![a.clone(); 8], 1).map_err(|e| e.to_string())?;
    let info = e(infonce(&a, &a, &negs))?;
    let eye = e(eye_contrastive_loss(&t2(&[&[1.0, 0.0]]), &t2(&[&[0.0, 1.0]]), &t2(&[&[1.0, 1.0]])))?;
    let mut be = MemoryBank::new(64, 1).unwrap();
    let mut ba = MemoryBank::new(64, 1).unwrap();
    let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin()]).collect();
    be.push_rows(&xs).unwrap();
    ba.push_rows(&xs.iter().map(|r| vec![3.0 * r[0] - 2.0]).collect::<Vec<_>>()).unwrap();
    let corr = bank_correlation(None, &be, None, &ba).map_err(|e| e.to_string())?;
    let dec = e(decorrelation_loss(&corr))?;
    let ok = (info - 9f64.ln()).abs() <= 1e-6 && (eye - 2f64.ln()).abs() <= 1e-6 && (dec - 1.0).abs() <= 1e-10;
    Ok((ok, format!("infonce {info:.9} (ln 9), eye {eye:.9} (ln 2), decorrelation {dec:.12}")))
}

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn images(seed: u64, b: usize, s: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..b * 3 * s * s).map(|_| rng.random::<f64>()).collect();
    Tensor::from_vec(v, (b, 3, s, s), &Device::Cpu).unwrap()
}

fn c3_gradients() -> Outcome {
    let mut store = ParamStore::new(5, DType::F64);
    let nets = Nets::build(&mut store, &NetConfig::small(16), |_| false).map_err(|e| e.to_string())?;
    let pyramid = PerceptualPyramid::new(0, DType::F64).map_err(|e| e.to_string())?;
    let (a, p, n) = (randn(1, &[3, 16]), randn(2, &[3, 16]), randn(3, &[3, 8, 16]));
    let (img, gt) = (images(4, 2, 16), images(5, 2, 16));
    let audio = randn(6, &[2, facectl::augment::AUDIO_WINDOW_DIM]);
    let mut bank_e = MemoryBank::new(32, 4).unwrap();
    let mut bank_a = MemoryBank::new(32, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let rows = |d: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..20).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect()).collect()
    };
    bank_e.push_rows(&rows(4, &mut rng)).unwrap();
    bank_a.push_rows(&rows(3, &mut rng)).unwrap();
    let cur_a = randn(8, &[6, 3]);
    let every = |t: &Tensor, k: usize| (0..t.elem_count()).step_by(k).collect::<Vec<_>>();

    type Check<'a> = (&'a str, Box<dyn Fn() -> facectl::Result<f64> + 'a>, f64);
    let checks: Vec<Check> = vec![
        ("motion recon", Box::new(|| Ok(check_gradient(|t| motion_recon_loss(&nets.probe, t, &gt), &img, 1e-6, Some(&every(&img, 5)))?.rel_error)), 1e-3),
        ("infonce a->v", Box::new(|| Ok(check_gradient(|t| infonce(t, &p, &n), &a, 1e-6, None)?.rel_error)), 1e-4),
        ("infonce v->a", Box::new(|| Ok(check_gradient(|t| infonce(&a, &p, t), &n, 1e-6, None)?.rel_error)), 1e-4),
        ("eye", Box::new(|| Ok(check_gradient(|t| eye_contrastive_loss(&p, t, &a), &randn(9, &[3, 16]), 1e-6, None)?.rel_error)), 1e-4),
        ("pose", Box::new(|| Ok(check_gradient(|t| pose_loss(t, &p), &a, 1e-6, None)?.rel_error)), 1e-4),
        (
            "decorrelation",
            Box::new(|| {
                let f = |t: &Tensor| decorrelation_loss(&bank_correlation(Some(t), &bank_e, Some(&cur_a), &bank_a)?);
                Ok(check_gradient(f, &randn(10, &[6, 4]), 1e-6, None)?.rel_error)
            }),
            1e-4,
        ),
        ("perceptual", Box::new(|| Ok(check_gradient(|t| pyramid.loss(t, &gt), &img, 1e-6, Some(&every(&img, 5)))?.rel_error)), 1e-3),
        (
            "consistency",
            Box::new(|| Ok(check_gradient(|t| consistency_loss(&nets, t, &gt, &audio)?.total(), &img, 1e-6, Some(&every(&img, 7)))?.rel_error)),
            1e-3,
        ),
    ];
    let mut ok = true;
    let mut parts = vec![];
    for (name, f, tol) in &checks {
        let r = f().map_err(|e| format!("{name}: {e}"))?;
        ok &= r < *tol;
        parts.push(format!("{name} {r:.1e}"));
    }
    Ok((ok, parts.join(", ")))
}

fn pearson(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len() as f64;
    let col = |m: &[Vec<f64>], j: usize| m.iter().map(|r| r[j]).collect::<Vec<f64>>();
    (0..x[0].len())
        .map(|i| {
            (0..y[0].len())
                .map(|j| {
                    let (a, b) = (col(x, i), col(y, j));
                    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
                    let cov: f64 = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum();
                    let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
                    let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
                    cov / (va * vb).sqrt()
                })
                .collect()
        })
        .collect()
}

fn c4_bank_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cap = 24;
    let (mut be, mut ba) = (MemoryBank::new(cap, 3).unwrap(), MemoryBank::new(cap, 2).unwrap());
    let (mut fifo_e, mut fifo_a): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (vec![], vec![]);
    let mut worst: f64 = 0.0;
    let mut states = 0;
    for chunk in [5, 4, 7, 9, 13, 24, 3, 30] {
        let e: Vec<Vec<f64>> = (0..chunk).map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let a: Vec<Vec<f64>> = e.iter().map(|r| vec![r[0] + rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0)]).collect();
        be.push_rows(&e).unwrap();
        ba.push_rows(&a).unwrap();
        fifo_e.extend(e);
        fifo_a.extend(a);
        let keep = fifo_e.len().saturating_sub(cap);
        fifo_e.drain(..keep);
        fifo_a.drain(..keep);
        if fifo_e.len() < 8 {
            continue;
        }
        // with and without gradient-carrying current rows on top
        let cur_e = randn(states as u64 + 100, &[4, 3]);
        let cur_a = randn(states as u64 + 200, &[4, 2]);
        for with_current in [false, true] {
            let c = if with_current {
                bank_correlation(Some(&cur_e), &be, Some(&cur_a), &ba)
            } else {
                bank_correlation(None, &be, None, &ba)
            }
            .map_err(|e| e.to_string())?;
            let got = c.matrix.to_vec2::<f64>().unwrap();
            let (mut xe, mut xa) = (vec![], vec![]);
            if with_current {
                xe.extend(cur_e.to_vec2::<f64>().unwrap());
                xa.extend(cur_a.to_vec2::<f64>().unwrap());
            }
            xe.extend(fifo_e.iter().cloned());
            xa.extend(fifo_a.iter().cloned());
            let want = pearson(&xe, &xa);
            for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
                worst = worst.max((g - w).abs());
            }
            states += 1;
        }
    }
    Ok((worst <= 1e-10, format!("max |diff| {worst:.1e} over {states} bank states (partial fill and wrap-around)")))
}

fn c5_toy_decorrelation() -> Outcome {
    const RHO: f64 = 0.8;
    const M: usize = 512;
    const BATCH: usize = 32;
    const MAX_STEPS: usize = 2000;
    let (de, da) = (4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    // column 0 of the raw stream carries correlation RHO with audio column 0
    let sample = |n: usize, rng: &mut ChaCha8Rng| -> (Tensor, Tensor) {
        let mut raw = Vec::with_capacity(n * de);
        let mut aud = Vec::with_capacity(n * da);
        for _ in 0..n {
            let a: Vec<f64> = (0..da).map(|_| StandardNormal.sample(rng)).collect();
            let z: f64 = StandardNormal.sample(rng);
            raw.push(RHO * a[0] + (1.0 - RHO * RHO).sqrt() * z);
            raw.extend((1..de).map(|_| { let v: f64 = StandardNormal.sample(rng); v }));
            aud.extend(a);
        }
        (Tensor::from_vec(raw, (n, de), &Device::Cpu).unwrap(), Tensor::from_vec(aud, (n, da), &Device::Cpu).unwrap())
    };
    let mut store = ParamStore::new(3, DType::F64);
    let w = store.get_or_init("proj/w", &[de, de], Init::Normal(0.5)).map_err(|e| e.to_string())?;
    let mut adam = Adam::new("proj", &store, vec!["proj/w".into()], AdamConfig::default()).map_err(|e| e.to_string())?;
    let (mut be, mut ba) = (MemoryBank::new(M, de).unwrap(), MemoryBank::new(M, da).unwrap());
    let (held_raw, held_aud) = sample(8192, &mut rng);
    let measure = |w: &Tensor| -> (f64, f64) {
        let e = held_raw.matmul(w).unwrap().to_vec2::<f64>().unwrap();
        let c = pearson(&e, &held_aud.to_vec2::<f64>().unwrap());
        let std_min = (0..de)
            .map(|j| {
                let m = e.iter().map(|r| r[j]).sum::<f64>() / e.len() as f64;
                (e.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / e.len() as f64).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        (c.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())), std_min)
    };
    let (start, _) = measure(w.as_tensor());
    let mut reached = None;
    for step in 1..=MAX_STEPS {
        let (raw, aud) = sample(BATCH, &mut rng);
        let e = raw.matmul(w.as_tensor()).map_err(|e| e.to_string())?;
        let loss = decorrelation_loss(&bank_correlation(Some(&e), &be, Some(&aud), &ba).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        adam.step(&store, &loss.backward().map_err(|e| e.to_string())?, 1e-2).map_err(|e| e.to_string())?;
        be.push(&e.detach()).map_err(|e| e.to_string())?;
        ba.push(&aud).map_err(|e| e.to_string())?;
        if step % 50 == 0 && measure(w.as_tensor()).0 < 0.1 {
            reached = Some(step);
            break;
        }
    }
    let (end, std_min) = measure(w.as_tensor());
    // a collapsed column would decorrelate trivially
    let ok = reached.is_some() && std_min > 1e-3;
    Ok((
        ok,
        format!(
            "max |corr| {start:.3} -> {end:.3} on held-out rows, below 0.1 at step {}, smallest output std {std_min:.3}",
            reached.map_or("never".into(), |s| s.to_string())
        ),
    ))
}

struct Trained {
    ckpt2: Checkpoint,
    test: Vec<Clip>,
    train: TrainData,
}

fn c6_lip(t: &Trained) -> Outcome {
    let m = TrainedModel::from_checkpoint(&t.ckpt2).map_err(|e| e.to_string())?;
    let acc = lip_retrieval_accuracy(&m, &t.test, 8, 5, 0).map_err(|e| e.to_string())?;
    Ok((acc >= 0.9, format!("top-1 among 9 same-clip candidates {:.1}% (need 90%)", acc * 100.0)))
}

fn c7_eye(t: &Trained) -> Outcome {
    let m = TrainedModel::from_checkpoint(&t.ckpt2).map_err(|e| e.to_string())?;
    let acc = eye_triplet_accuracy(&m, &t.test, 0).map_err(|e| e.to_string())?;
    Ok((acc >= 0.95, format!("anchor closer to eye donor on {:.1}% of triplets (need 95%)", acc * 100.0)))
}

fn c8_pose(t: &Trained) -> Outcome {
    let m = TrainedModel::from_checkpoint(&t.ckpt2).map_err(|e| e.to_string())?;
    let mse = pose_head_mse(&m, &t.test).map_err(|e| e.to_string())?;
    Ok((mse < 1e-2, format!("normalized pose MSE {mse:.2e} (need < 1e-2)")))
}

fn stage3_variant(p: &Profile, t: &Trained, v: &Variant) -> Result<Checkpoint, String> {
    let base = p.config("3", &[]);
    let cfg = v.apply(&base).map_err(|e| e.to_string())?;
    train(&cfg, &t.train, Some(&t.ckpt2))
}

fn c9_matrix(all: &Checkpoint, test: &[Clip]) -> Outcome {
    let m = TrainedModel::from_checkpoint(all).map_err(|e| e.to_string())?;
    let reader = Evaluator::new(&m).reader();
    let mat = disentanglement_matrix(&m, &reader, test).map_err(|e| e.to_string())?;
    let r = mat.row_ratios();
    Ok((
        mat.min_ratio() >= 3.0,
        format!("row on/off ratios lip {:.2} pose {:.2} blink {:.2} gaze {:.2} exp {:.2} (need >= 3)", r[0], r[1], r[2], r[3], r[4]),
    ))
}

fn c10_ablation(p: &Profile, t: &Trained, all: &Checkpoint) -> Outcome {
    let v = |name: &str, k_win, decorrelation| Variant { name: name.into(), k_win, decorrelation };
    let full = v("All", 13, true);
    let none = v("No dis", 1, false);
    let win1 = v("window 1", 1, true);
    let score = |var: &Variant, ck: &Checkpoint| score_variant(var, ck, &t.test, None).map_err(|e| e.to_string());
    let s_all = score(&full, all)?.sync_confidence;
    let s_none = score(&none, &stage3_variant(p, t, &none)?)?.sync_confidence;
    let s_w1 = score(&win1, &stage3_variant(p, t, &win1)?)?.sync_confidence;
    let drop = if s_all > 0.0 { 1.0 - s_none / s_all } else { f64::NAN };
    let ok = s_all > 0.0 && drop >= 0.3 && s_w1 < s_all;
    Ok((
        ok,
        format!("fixed-expression sync: all {s_all:.4}, no-dis {s_none:.4} ({:.0}% lower, need 30%), window 1 {s_w1:.4} vs window 13 {s_all:.4}", drop * 100.0),
    ))
}

/// Short full pipeline, run twice.
fn c11_determinism(p: &Profile) -> Outcome {
    let world = WorldConfig { seed: 5, identities: 2, clips_per_identity: 2, clip_length: 16, ..Default::default() };
    let quick = vec!["max_steps=3".to_string(), "batch_size=4".to_string()];
    let run = || -> Result<(Vec<Vec<u8>>, String), String> {
        let data = TrainData::new(generate_split(&world, Split::Train).unwrap()).map_err(|e| e.to_string())?;
        let test = generate_split(&world, Split::Test).unwrap();
        let mut bytes = vec![];
        let mut ckpt = train(&p.config("probe", &quick), &data, None)?;
        bytes.push(ckpt.to_bytes().map_err(|e| e.to_string())?);
        for tag in ["1", "2-lip", "2-eye", "2-pose", "3"] {
            let mut extra = quick.clone();
            if tag == "3" {
                extra.extend(["expression.k_win=3".into(), "expression.window_variants=2".into()]);
            }
            ckpt = train(&p.config(tag, &extra), &data, Some(&ckpt))?;
            bytes.push(ckpt.to_bytes().map_err(|e| e.to_string())?);
        }
        let m = TrainedModel::from_checkpoint(&ckpt).map_err(|e| e.to_string())?;
        let ev = Evaluator::new(&m);
        let mut report = String::new();
        for spec in [ProtocolSpec::SELF_DRIVING, ProtocolSpec::CROSS_VIDEO, ProtocolSpec::CROSS_VIDEO_FIXED_EXP] {
            report += &run_protocol(&spec, &m, &ev, &test, None).and_then(|r| r.to_json()).map_err(|e| e.to_string())?;
        }
        Ok((bytes, report))
    };
    let (a, b) = (run()?, run()?);
    let same_ckpt = a.0 == b.0;
    let same_report = a.1 == b.1;
    Ok((
        same_ckpt && same_report,
        format!("{} checkpoints byte-identical: {same_ckpt}; metric reports identical: {same_report}", a.0.len()),
    ))
}

struct Line {
    id: usize,
    hard: bool,
    pass: bool,
    text: String,
}

fn record(lines: &mut Vec<Line>, id: usize, hard: bool, name: &str, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let (pass, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    let text = format!(
        "criterion {id:>2} {} {name}: {detail} [{:.1?}]",
        if pass { "PASS" } else { "FAIL" },
        t.elapsed()
    );
    println!("{text}");
    lines.push(Line { id, hard, pass, text });
}

fn main() {
    let p = Profile::from_env();
    let strict = std::env::var("FACECTL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    println!("acceptance profile: {}", p.name);
    let mut lines = vec![];
    record(&mut lines, 1, true, "NLSE-C arithmetic", c1_nlsec);
    record(&mut lines, 2, true, "closed-form losses", c2_closed_forms);
    record(&mut lines, 3, true, "gradient oracle", c3_gradients);
    record(&mut lines, 4, true, "memory-bank oracle", c4_bank_oracle);
    record(&mut lines, 5, true, "toy decorrelation", c5_toy_decorrelation);

    let t = Instant::now();
    let trained = (|| -> Result<Trained, String> {
        let train = TrainData::new(generate_split(&p.world, Split::Train).unwrap()).map_err(|e| e.to_string())?;
        let mut test = generate_split(&p.world, Split::Test).unwrap();
        if p.test_clips > 0 {
            test.truncate(p.test_clips);
        }
        let ckpt2 = train_to_stage2(&p, &train, &[])?;
        Ok(Trained { ckpt2, test, train })
    })();
    eprintln!("  stage-2 pipeline ready in {:.0?}", t.elapsed());
    match &trained {
        Ok(t) => {
            record(&mut lines, 6, false, "stage-2 lip retrieval", || c6_lip(t));
            record(&mut lines, 7, false, "eye contrastive", || c7_eye(t));
            record(&mut lines, 8, false, "pose head", || c8_pose(t));
            let full = Variant { name: "All".into(), k_win: 13, decorrelation: true };
            match stage3_variant(&p, t, &full) {
                Ok(all) => {
                    record(&mut lines, 9, false, "disentanglement matrix", || c9_matrix(&all, &t.test));
                    record(&mut lines, 10, false, "ablation direction", || c10_ablation(&p, t, &all));
                }
                Err(e) => {
                    for (id, name) in [(9, "disentanglement matrix"), (10, "ablation direction")] {
                        record(&mut lines, id, false, name, || Err(format!("stage 3 failed: {e}")));
                    }
                }
            }
        }
        Err(e) => {
            for (id, name) in [(6, "stage-2 lip retrieval"), (7, "eye contrastive"), (8, "pose head"), (9, "disentanglement matrix"), (10, "ablation direction")] {
                record(&mut lines, id, false, name, || Err(format!("training failed: {e}")));
            }
        }
    }
    record(&mut lines, 11, true, "determinism", || c11_determinism(&p));

    lines.sort_by_key(|l| l.id);
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("\nsummary ({} profile): {passed}/{} criteria met", p.name, lines.len());
    for l in &lines {
        println!("{}", l.text);
    }
    let fatal = lines.iter().any(|l| !l.pass && (l.hard || strict));
    if fatal {
        std::process::exit(1);
    }
}
