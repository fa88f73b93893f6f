//! FIFO feature banks and the cross-correlation penalty computed over them.

use std::collections::VecDeque;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Fewest rows over which a correlation is computed.
pub const MIN_CORRELATION_ROWS: usize = 8;

/// The `capacity` most recent feature rows, stored as detached constants.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<f64>>,
    pushed: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("memory bank capacity and dim must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity),
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rebuilds a bank from its stored rows (oldest first) and push counter.
    pub fn restore(capacity: usize, dim: usize, rows: Vec<Vec<f64>>, pushed: u64) -> Result<Self> {
        let mut b = Self::new(capacity, dim)?;
        if rows.len() > capacity || (rows.len() as u64) > pushed {
            return Err(Error::Validation(format!(
                "{} rows cannot come from a bank of capacity {capacity} after {pushed} pushes",
                rows.len()
            )));
        }
        b.push_rows(&rows)?;
        b.pushed = pushed;
        Ok(b)
    }

    /// Total rows ever pushed; the write cursor is `pushed % capacity`.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    /// Oldest first.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(|r| r.as_slice())
    }

    pub fn push_rows(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        for r in rows {
            if r.len() != self.dim {
                return Err(Error::Shape(format!(
                    "bank rows have dim {}, got {}",
                    self.dim,
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite value pushed into a memory bank".into()));
            }
        }
        for r in rows {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(r.clone());
            self.pushed += 1;
        }
        Ok(())
    }

    /// Stores the values of a `[B, dim]` tensor, detached.
    pub fn push(&mut self, rows: &Tensor) -> Result<()> {
        let rows = tensor_rows(rows)?;
        self.push_rows(&rows)
    }

    /// Stored rows as a constant `[len, dim]` f64 tensor.
    pub fn to_tensor(&self) -> Result<Option<Tensor>> {
        if self.rows.is_empty() {
            return Ok(None);
        }
        let flat: Vec<f64> = self.rows.iter().flatten().copied().collect();
        Ok(Some(Tensor::from_vec(
            flat,
            (self.rows.len(), self.dim),
            &candle_core::Device::Cpu,
        )?))
    }
}

pub(crate) fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!("expected [B, D] rows, got {:?}", t.dims())));
    }
    Ok(t.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Returns `bank` after pushing `rows`.
pub fn bank_push(mut bank: MemoryBank, rows: &Tensor) -> Result<MemoryBank> {
    bank.push(rows)?;
    Ok(bank)
}

/// Pearson correlations between every column of one sample and every column of another.
#[derive(Clone, Debug)]
pub struct Correlation {
    /// `[D_e, D_a]`, f64.
    pub matrix: Tensor,
    /// Columns whose variance vanished; their correlations are 0.
    pub zero_variance_columns: usize,
    pub rows: usize,
}

fn stack(current: Option<&Tensor>, bank: &MemoryBank) -> Result<Tensor> {
    let stored = bank.to_tensor()?;
    let current = current.map(|c| c.to_dtype(DType::F64)).transpose()?;
    match (current, stored) {
        (Some(c), Some(s)) => {
            if c.dim(1)? != bank.dim() {
                return Err(Error::Shape(format!(
                    "current rows have dim {}, bank has {}",
                    c.dim(1)?,
                    bank.dim()
                )));
            }
            Ok(Tensor::cat(&[&c, &s], 0)?)
        }
        (Some(c), None) => Ok(c),
        (None, Some(s)) => Ok(s),
        (None, None) => Ok(Tensor::zeros((0, bank.dim()), DType::F64, &candle_core::Device::Cpu)?),
    }
}

/// Centers and scales columns to unit norm; zero-variance columns become zero.
fn normalize(x: &Tensor) -> Result<(Tensor, usize)> {
    let n = x.dim(0)?;
    let mean = x.mean_keepdim(0)?;
    let xc = x.broadcast_sub(&mean)?;
    let ss = xc.sqr()?.sum_keepdim(0)?;
    let ss_v = ss.flatten_all()?.to_vec1::<f64>()?;
    let mean_v = mean.flatten_all()?.to_vec1::<f64>()?;
    let mask: Vec<f64> = ss_v
        .iter()
        .zip(&mean_v)
        // relative to the column scale so rounding residue of constant columns counts as zero
        .map(|(s, m)| if *s <= 1e-24 * n as f64 * (1.0 + m * m) { 0.0 } else { 1.0 })
        .collect();
    let zero = mask.iter().filter(|m| **m == 0.0).count();
    let mask = Tensor::from_vec(mask, (1, ss_v.len()), x.device())?;
    let norm = (ss + (1.0 - &mask)?)?.sqrt()?;
    Ok((xc.broadcast_div(&norm)?.broadcast_mul(&mask)?, zero))
}

/// Correlation over the current-batch rows (gradient-carrying) stacked on the
/// stored bank rows (constant). Rows are paired by position, so both sides
/// must hold the same number of rows.
pub fn bank_correlation(
    current_e: Option<&Tensor>,
    bank_e: &MemoryBank,
    current_a: Option<&Tensor>,
    bank_a: &MemoryBank,
) -> Result<Correlation> {
    let x = stack(current_e, bank_e)?;
    let y = stack(current_a, bank_a)?;
    let (nx, ny) = (x.dim(0)?, y.dim(0)?);
    if nx != ny {
        return Err(Error::Shape(format!(
            "correlated samples need paired rows, got {nx} and {ny}"
        )));
    }
    if nx < MIN_CORRELATION_ROWS {
        return Err(Error::InsufficientSamples {
            needed: MIN_CORRELATION_ROWS,
            have: nx,
        });
    }
    let (xn, zx) = normalize(&x)?;
    let (yn, zy) = normalize(&y)?;
    let zero = zx + zy;
    if zero > 0 {
        log::warn!("{zero} zero-variance columns in bank correlation; their correlations are set to 0");
    }
    Ok(Correlation {
        matrix: xn.t()?.matmul(&yn)?,
        zero_variance_columns: zero,
        rows: nx,
    })
}

/// Mean squared entry of a correlation matrix, as a scalar of the matrix dtype.
pub fn decorrelation_loss(corr: &Correlation) -> Result<Tensor> {
    Ok(corr.matrix.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    }

    fn brute_pearson(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = x.len() as f64;
        let col = |m: &[Vec<f64>], j: usize| m.iter().map(|r| r[j]).collect::<Vec<_>>();
        let mut out = vec![vec![0.0; y[0].len()]; x[0].len()];
        for (i, row) in out.iter_mut().enumerate() {
            let a = col(x, i);
            let ma = a.iter().sum::<f64>() / n;
            for (j, v) in row.iter_mut().enumerate() {
                let b = col(y, j);
                let mb = b.iter().sum::<f64>() / n;
                let cov: f64 = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum();
                let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
                let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
                *v = cov / (va.sqrt() * vb.sqrt());
            }
        }
        out
    }

    fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap()
    }

    #[test]
    fn fifo_keeps_latest_rows() {
        let mut b = MemoryBank::new(3, 1).unwrap();
        for i in 0..5 {
            b.push_rows(&[vec![i as f64]]).unwrap();
            assert_eq!(b.len(), (i + 1).min(3));
        }
        let rows: Vec<f64> = b.rows().map(|r| r[0]).collect();
        assert_eq!(rows, vec![2.0, 3.0, 4.0]);
        assert_eq!(b.pushed(), 5);
        assert!(b.push_rows(&[vec![1.0, 2.0]]).is_err());
        assert!(b.push_rows(&[vec![f64::NAN]]).is_err());
    }

    #[test]
    fn matches_brute_force_across_wraparound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut be = MemoryBank::new(20, 3).unwrap();
        let mut ba = MemoryBank::new(20, 2).unwrap();
        let mut hist_e: Vec<Vec<f64>> = Vec::new();
        let mut hist_a: Vec<Vec<f64>> = Vec::new();
        for _ in 0..6 {
            let ce = normal_rows(&mut rng, 4, 3);
            let ca = normal_rows(&mut rng, 4, 2);
            if hist_e.len() + 4 >= MIN_CORRELATION_ROWS {
                let c = bank_correlation(Some(&rows_tensor(&ce)), &be, Some(&rows_tensor(&ca)), &ba)
                    .unwrap();
                let start = hist_e.len().saturating_sub(20);
                let mut xe = ce.clone();
                xe.extend_from_slice(&hist_e[start..]);
                let mut xa = ca.clone();
                xa.extend_from_slice(&hist_a[start..]);
                let want = brute_pearson(&xe, &xa);
                let got = c.matrix.to_vec2::<f64>().unwrap();
                for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
                    assert!((g - w).abs() < 1e-10);
                }
            }
            be.push_rows(&ce).unwrap();
            ba.push_rows(&ca).unwrap();
            hist_e.extend(ce);
            hist_a.extend(ca);
        }
        assert_eq!(be.len(), 20);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let be = MemoryBank::new(8, 2).unwrap();
        let x = Tensor::zeros((7, 2), DType::F64, &Device::Cpu).unwrap();
        let r = bank_correlation(Some(&x), &be, Some(&x), &be);
        assert!(matches!(r, Err(Error::InsufficientSamples { needed: 8, have: 7 })));
    }

    #[test]
    fn constant_rows_give_zero_correlation() {
        let mut be = MemoryBank::new(16, 2).unwrap();
        let mut ba = MemoryBank::new(16, 2).unwrap();
        be.push_rows(&vec![vec![0.3, -1.7]; 16]).unwrap();
        ba.push_rows(&vec![vec![2.1, 0.1]; 16]).unwrap();
        let c = bank_correlation(None, &be, None, &ba).unwrap();
        assert_eq!(c.zero_variance_columns, 4);
        assert!(c.matrix.to_vec2::<f64>().unwrap().iter().flatten().all(|v| *v == 0.0));
        assert_eq!(decorrelation_loss(&c).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn perfectly_correlated_streams_give_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = normal_rows(&mut rng, 64, 1);
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![-2.5 * r[0] + 0.7]).collect();
        let mut be = MemoryBank::new(64, 1).unwrap();
        let mut ba = MemoryBank::new(64, 1).unwrap();
        be.push_rows(&x).unwrap();
        ba.push_rows(&y).unwrap();
        let c = bank_correlation(None, &be, None, &ba).unwrap();
        let l = decorrelation_loss(&c).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 1.0).abs() < 1e-10);
    }

    #[test]
    fn independent_streams_are_nearly_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut be = MemoryBank::new(512, 16).unwrap();
        let mut ba = MemoryBank::new(512, 32).unwrap();
        be.push_rows(&normal_rows(&mut rng, 512, 16)).unwrap();
        ba.push_rows(&normal_rows(&mut rng, 512, 32)).unwrap();
        let c = bank_correlation(None, &be, None, &ba).unwrap();
        let m = c.matrix.to_vec2::<f64>().unwrap();
        assert!(m.iter().flatten().all(|v| v.abs() < 0.2));
        assert!(decorrelation_loss(&c).unwrap().to_scalar::<f64>().unwrap() < 0.01);
    }

    #[test]
    fn stored_rows_carry_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut be = MemoryBank::new(16, 2).unwrap();
        let mut ba = MemoryBank::new(16, 2).unwrap();
        let stored = rows_tensor(&normal_rows(&mut rng, 12, 2));
        be.push(&stored).unwrap();
        ba.push_rows(&normal_rows(&mut rng, 12, 2)).unwrap();
        let cur = Var::from_tensor(&rows_tensor(&normal_rows(&mut rng, 4, 2))).unwrap();
        let cur_a = rows_tensor(&normal_rows(&mut rng, 4, 2));
        let c = bank_correlation(Some(cur.as_tensor()), &be, Some(&cur_a), &ba).unwrap();
        let g = decorrelation_loss(&c).unwrap().backward().unwrap();
        assert!(g.get(cur.as_tensor()).is_some());
        assert!(g.get(&stored).is_none());
    }
}
