use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::synthworld::{readout_slice, Keypoints, MotionFactor, MOUTH_KEYPOINTS, READOUT_DIM};

pub type Readout = [f32; READOUT_DIM];

/// Relative deviation of a sync score from the score of the training data.
pub fn nlsec(score_gen: f64, score_train_gt: f64) -> Result<f64> {
    if !(score_train_gt > 0.0) || !score_gen.is_finite() {
        return Err(Error::UndefinedMetric(format!(
            "NLSE-C needs a positive reference score, got {score_train_gt}"
        )));
    }
    Ok((score_gen - score_train_gt).abs() / score_train_gt)
}

/// Mean keypoint distance in pixels over all landmarks and over the mouth subset.
pub fn lmd(gen: &[Keypoints], gt: &[Keypoints]) -> Result<(f64, f64)> {
    if gen.len() != gt.len() || gen.is_empty() {
        return Err(Error::Shape(format!(
            "landmark sequences differ or are empty: {} vs {}",
            gen.len(),
            gt.len()
        )));
    }
    let dist = |a: [f32; 2], b: [f32; 2]| {
        ((a[0] - b[0]) as f64).hypot((a[1] - b[1]) as f64)
    };
    let (mut all, mut mouth) = (0.0, 0.0);
    for (g, t) in gen.iter().zip(gt) {
        for k in 0..g.len() {
            let d = dist(g[k], t[k]);
            all += d;
            if MOUTH_KEYPOINTS.contains(&k) {
                mouth += d;
            }
        }
    }
    let n = gen.len() as f64;
    Ok((all / (n * gen[0].len() as f64), mouth / (n * MOUTH_KEYPOINTS.len() as f64)))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    let d = (aa * bb).sqrt();
    if d <= 1e-24 {
        0.0
    } else {
        ab / d
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean over frames of the synced lip/audio similarity minus its median over
/// every audio offset of the clip.
pub fn sync_confidence(lip: &[Vec<f32>], audio: &[Vec<f32>]) -> Result<f64> {
    if lip.len() != audio.len() || lip.len() < 2 {
        return Err(Error::Shape(format!(
            "sync needs two equal sequences of at least 2 frames, got {} and {}",
            lip.len(),
            audio.len()
        )));
    }
    let n = lip.len();
    let mut total = 0.0;
    let mut row = vec![0.0; n];
    for t in 0..n {
        for (u, r) in row.iter_mut().enumerate() {
            *r = cosine(&lip[t], &audio[u]);
        }
        let synced = row[t];
        total += synced - median(&mut row);
    }
    Ok(total / n as f64)
}

/// Mean squared difference of one factor's readout between generated and driving frames.
pub fn control_mse(factor: MotionFactor, gen: &[Readout], driver: &[Readout]) -> Result<f64> {
    if gen.len() != driver.len() || gen.is_empty() {
        return Err(Error::Shape("readout sequences differ or are empty".into()));
    }
    let r = readout_slice(factor);
    let mut s = 0.0;
    for (g, d) in gen.iter().zip(driver) {
        for i in r.clone() {
            s += ((g[i] - d[i]) as f64).powi(2);
        }
    }
    Ok(s / (gen.len() * r.len()) as f64)
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    if a.data.len() != b.data.len() {
        return Err(Error::Shape("images differ in size".into()));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// `values[measured][controlled]`, factors ordered as [`MotionFactor::ALL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementMatrix {
    pub values: [[f64; 5]; 5],
}

impl DisentanglementMatrix {
    /// Ratio of each row's diagonal entry to its largest off-diagonal entry.
    pub fn row_ratios(&self) -> [f64; 5] {
        let mut out = [0.0; 5];
        for (i, row) in self.values.iter().enumerate() {
            let off = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .fold(0.0, f64::max);
            out[i] = if off == 0.0 {
                if row[i] > 0.0 { f64::INFINITY } else { 0.0 }
            } else {
                row[i] / off
            };
        }
        out
    }

    pub fn min_ratio(&self) -> f64 {
        self.row_ratios().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["measured".to_string()];
        header.extend(MotionFactor::ALL.iter().map(|f| f.name().to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for (i, f) in MotionFactor::ALL.iter().enumerate() {
            let mut rec = vec![f.name().to_string()];
            rec.extend(self.values[i].iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
            .map_err(|e| Error::Data(e.to_string()))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Mean over frames of the distance of one factor's readout from its clip mean.
pub fn factor_deviation(factor: MotionFactor, readouts: &[Readout]) -> f64 {
    let r = readout_slice(factor);
    let n = readouts.len() as f64;
    let mean: Vec<f64> = r
        .clone()
        .map(|i| readouts.iter().map(|x| x[i] as f64).sum::<f64>() / n)
        .collect();
    readouts
        .iter()
        .map(|x| {
            r.clone()
                .zip(&mean)
                .map(|(i, m)| (x[i] as f64 - m).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n
}

/// Builds the matrix from `clips[c][controlled]`, the readouts of the frames
/// generated for clip `c` with only `controlled` driven.
pub fn matrix_from_readouts(clips: &[[Vec<Readout>; 5]]) -> Result<DisentanglementMatrix> {
    if clips.is_empty() || clips.iter().any(|c| c.iter().any(Vec::is_empty)) {
        return Err(Error::Shape("disentanglement needs frames for every clip and factor".into()));
    }
    let mut values = [[0.0; 5]; 5];
    for c in clips {
        for (j, frames) in c.iter().enumerate() {
            for (i, &f) in MotionFactor::ALL.iter().enumerate() {
                values[i][j] += factor_deviation(f, frames) / clips.len() as f64;
            }
        }
    }
    Ok(DisentanglementMatrix { values })
}

/// `steps` mixing weights from 0 to 1 inclusive.
pub fn interpolation_alphas(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::Config(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    Ok((0..steps).map(|i| i as f64 / (steps - 1) as f64).collect())
}

/// Whether each coordinate of `path` moves in one direction, ignoring
/// reversals smaller than `tol`.
pub fn is_monotone(path: &[Vec<f64>], tol: f64) -> bool {
    let Some(first) = path.first() else { return true };
    (0..first.len()).all(|k| {
        let dir = path.last().unwrap()[k] - first[k];
        let mut best = first[k];
        path.iter().all(|p| {
            let ok = if dir >= 0.0 { p[k] >= best - tol } else { p[k] <= best + tol };
            best = if dir >= 0.0 { best.max(p[k]) } else { best.min(p[k]) };
            ok
        })
    })
}
