//! Fully connected layer: y = x W^T + b on [batch, features] inputs.

use rand_chacha::ChaCha8Rng;

use super::conv::kaiming_dense;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    /// [out_features, in_features]
    pub weight: Tensor,
    /// [out_features]
    pub bias: Tensor,
    pub frozen: bool,
    cache: Option<Tensor>,
}

impl Dense {
    pub fn new(in_features: usize, out_features: usize, weight: Tensor, bias: Tensor) -> Self {
        Dense {
            in_features,
            out_features,
            weight,
            bias,
            frozen: false,
            cache: None,
        }
    }

    pub fn kaiming(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = kaiming_dense(rng, out_features, in_features);
        let bias = Tensor::zeros(vec![out_features]);
        Dense::new(in_features, out_features, weight, bias)
    }

    pub fn name(&self) -> String {
        format!("Dense({}->{})", self.in_features, self.out_features)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 2 || input[1] != self.in_features {
            return Err(Error::ShapeMismatch {
                context: format!("{} input", self.name()),
                expected: vec![0, self.in_features],
                got: input.to_vec(),
            });
        }
        Ok(vec![input[0], self.out_features])
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.predict(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(input.shape())?;
        let n = input.shape()[0];
        let (fi, fo) = (self.in_features, self.out_features);
        let x = input.data();
        let w = self.weight.data();
        let b = self.bias.data();
        let mut out = vec![0.0; n * fo];
        for ni in 0..n {
            let x_row = &x[ni * fi..(ni + 1) * fi];
            for o in 0..fo {
                let w_row = &w[o * fi..(o + 1) * fi];
                let mut acc = b[o];
                for (wv, xv) in w_row.iter().zip(x_row.iter()) {
                    acc += wv * xv;
                }
                out[ni * fo + o] = acc;
            }
        }
        Ok(Tensor::from_vec(out_shape, out))
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or_else(|| Error::BackwardBeforeForward {
            layer: self.name(),
        })?;
        let n = input.shape()[0];
        grad_out.assert_shape(&[n, self.out_features], &format!("{} backward", self.name()))?;
        let (fi, fo) = (self.in_features, self.out_features);
        let x = input.data();
        let go = grad_out.data();
        let w = self.weight.data().to_vec();

        let mut dx = vec![0.0; n * fi];
        {
            let dw = self.weight.grad_mut();
            for ni in 0..n {
                let x_row = &x[ni * fi..(ni + 1) * fi];
                for o in 0..fo {
                    let g = go[ni * fo + o];
                    if g == 0.0 {
                        continue;
                    }
                    let w_row = &w[o * fi..(o + 1) * fi];
                    let dw_row = &mut dw[o * fi..(o + 1) * fi];
                    let dx_row = &mut dx[ni * fi..(ni + 1) * fi];
                    for i in 0..fi {
                        dw_row[i] += g * x_row[i];
                        dx_row[i] += g * w_row[i];
                    }
                }
            }
        }
        {
            let db = self.bias.grad_mut();
            for ni in 0..n {
                for o in 0..fo {
                    db[o] += go[ni * fo + o];
                }
            }
        }
        Ok(Tensor::from_vec(input.shape().to_vec(), dx))
    }
}
