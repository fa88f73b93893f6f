use candle_core::Tensor;

use super::conv::conv2d;
use super::params::{Binder, Init};
use crate::error::{Error, Result};

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(((x.relu()? * (1.0 - slope))? + (x * slope)?)?)
}

/// Logistic function through `tanh`, whose gradient stays finite for large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(p: &mut Binder, fan_in: usize, fan_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            w: p.param("w", &[fan_in, fan_out], init)?,
            b: p.param("b", &[fan_out], Init::Zeros)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dims();
        if d.len() != 2 || d[1] != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear layer expects [N, {}], got {d:?}",
                self.in_dim()
            )));
        }
        Ok(x.matmul(&self.w)?.broadcast_add(&self.b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new(
        p: &mut Binder,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            w: p.param("w", &[cout, cin, k, k], init)?,
            b: p.param("b", &[cout], Init::Zeros)?,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let cin = self.w.dims()[1];
        if x.rank() != 4 || x.dims()[1] != cin {
            return Err(Error::Shape(format!(
                "conv expects [B, {cin}, H, W], got {:?}",
                x.dims()
            )));
        }
        let y = conv2d(x, &self.w, self.stride, self.pad)?;
        Ok(y.broadcast_add(&self.b.reshape((1, self.out_channels(), 1, 1))?)?)
    }
}

/// Linear layers with ReLU between them and no activation after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(p: &mut Binder, dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output dims".into()));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut p.sub(&format!("l{i}")), w[0], w[1], Init::kaiming(w[0], 0.0)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = candle_core::Var::new(&[-200.0f32, 0.0, 200.0], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap();
        assert_eq!(y.to_vec1::<f32>().unwrap(), vec![0.0, 0.5, 1.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap().to_vec1::<f32>().unwrap();
        assert!(gx.iter().all(|v| v.is_finite()));
        assert_eq!(gx[1], 0.25);
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[-1.0f64, 2.0], &Device::Cpu).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).unwrap().to_vec1::<f64>().unwrap(), vec![-0.2, 2.0]);
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let mut s = ParamStore::new(0, DType::F32);
        let mlp = Mlp::new(&mut s.binder("m", true), &[4, 8, 2]).unwrap();
        let x = Tensor::zeros((3, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(mlp.forward(&x), Err(Error::Shape(_))));
        let ok = mlp.forward(&Tensor::zeros((3, 4), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(ok.dims(), &[3, 2]);
    }
}
