//! Feature-space image distance from a fixed random convolutional pyramid.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::{conv2d, leaky_relu};

pub const PYRAMID_LEVELS: usize = 4;
const LEVEL_CHANNELS: [usize; PYRAMID_LEVELS] = [8, 16, 16, 16];

/// Four stride-2 3×3 convolutions with fixed seeded weights.
#[derive(Clone, Debug)]
pub struct PerceptualPyramid {
    weights: Vec<Tensor>,
    seed: u64,
}

impl PerceptualPyramid {
    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut weights = Vec::with_capacity(PYRAMID_LEVELS);
        for &cout in &LEVEL_CHANNELS {
            let bound = (6.0 / (cin * 9) as f64).sqrt();
            let w: Vec<f64> = (0..cout * cin * 9)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            weights.push(Tensor::from_vec(w, (cout, cin, 3, 3), &Device::Cpu)?.to_dtype(dtype)?);
            cin = cout;
        }
        Ok(Self { weights, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.to_dtype(self.weights[0].dtype())?;
        let mut out = Vec::with_capacity(PYRAMID_LEVELS);
        for w in &self.weights {
            h = leaky_relu(&conv2d(&h, w, 2, 1)?, 0.2)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Pixel L1 plus the L1 distance at each pyramid level, all as means.
    pub fn loss(&self, out: &Tensor, gt: &Tensor) -> Result<Tensor> {
        if out.dims() != gt.dims() || out.rank() != 4 {
            return Err(Error::Shape(format!(
                "perceptual loss needs equal [B, 3, H, W] images, got {:?} and {:?}",
                out.dims(),
                gt.dims()
            )));
        }
        let mut total = (out - gt)?.abs()?.mean_all()?;
        for (a, b) in self.features(out)?.iter().zip(self.features(gt)?) {
            total = (total + (a - b)?.abs()?.mean_all()?)?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gradcheck::check_gradient;

    fn random_images(seed: u64, b: usize, s: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..b * 3 * s * s).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(v, (b, 3, s, s), &Device::Cpu).unwrap()
    }

    #[test]
    fn identical_images_have_zero_loss_and_order_does_not_matter() {
        let p = PerceptualPyramid::new(1, DType::F64).unwrap();
        let a = random_images(1, 2, 16);
        let b = random_images(2, 2, 16);
        assert_eq!(p.loss(&a, &a).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let ab = p.loss(&a, &b).unwrap().to_scalar::<f64>().unwrap();
        let ba = p.loss(&b, &a).unwrap().to_scalar::<f64>().unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = PerceptualPyramid::new(4, DType::F64).unwrap();
        let gt = random_images(5, 1, 8);
        let x = random_images(6, 1, 8);
        let r = check_gradient(|t| p.loss(t, &gt), &x, 1e-6, None).unwrap();
        assert!(r.rel_error < 1e-4, "{}", r.rel_error);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = PerceptualPyramid::new(7, DType::F32).unwrap();
        let b = PerceptualPyramid::new(7, DType::F32).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert_eq!(
                x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }
}
