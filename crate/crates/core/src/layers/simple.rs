//! Parameter-free layers: ReLU, Sigmoid, MaxPool2x2 and Flatten.

use super::dims4;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        self.cache = Some(input.data().iter().map(|&v| v > 0.0).collect());
        self.predict(input)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let data = input.data().iter().map(|&v| v.max(0.0)).collect();
        Ok(Tensor::from_vec(input.shape().to_vec(), data))
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = self.cache.take().ok_or_else(|| Error::BackwardBeforeForward {
            layer: "ReLU".into(),
        })?;
        if mask.len() != grad_out.len() {
            return Err(Error::ShapeMismatch {
                context: "ReLU backward".into(),
                expected: vec![mask.len()],
                got: vec![grad_out.len()],
            });
        }
        let data = grad_out
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(grad_out.shape().to_vec(), data))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    cache: Option<Vec<f64>>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Sigmoid::default()
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.predict(input)?;
        self.cache = Some(out.data().to_vec());
        Ok(out)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let data = input
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        Ok(Tensor::from_vec(input.shape().to_vec(), data))
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let y = self.cache.take().ok_or_else(|| Error::BackwardBeforeForward {
            layer: "Sigmoid".into(),
        })?;
        if y.len() != grad_out.len() {
            return Err(Error::ShapeMismatch {
                context: "Sigmoid backward".into(),
                expected: vec![y.len()],
                got: vec![grad_out.len()],
            });
        }
        let data = grad_out
            .data()
            .iter()
            .zip(y.iter())
            .map(|(&g, &y)| g * y * (1.0 - y))
            .collect();
        Ok(Tensor::from_vec(grad_out.shape().to_vec(), data))
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Ties resolve to the first element in scan order, which keeps gradients
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        MaxPool2x2::default()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (n, c, h, w) = dims4(input, "MaxPool2x2")?;
        if h < 2 || w < 2 {
            return Err(Error::SpatialCollapse {
                layer: "MaxPool2x2".into(),
                input: input.to_vec(),
            });
        }
        Ok(vec![n, c, h / 2, w / 2])
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let (out, argmax) = self.pool(input)?;
        self.cache = Some((argmax, input.shape().to_vec()));
        Ok(out)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.pool(input)?.0)
    }

    fn pool(&self, input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let out_shape = self.output_shape(input.shape())?;
        let (n, c, h, w) = dims4(input.shape(), "MaxPool2x2")?;
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let x = input.data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for nc in 0..n * c {
            let base = nc * h * w;
            let o_base = nc * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let i0 = base + (2 * oh) * w + 2 * ow;
                    let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = candidates[0];
                    for &c in &candidates[1..] {
                        if x[c] > x[best] {
                            best = c;
                        }
                    }
                    out[o_base + oh * wo + ow] = x[best];
                    argmax[o_base + oh * wo + ow] = best;
                }
            }
        }
        Ok((Tensor::from_vec(out_shape, out), argmax))
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (argmax, in_shape) =
            self.cache.take().ok_or_else(|| Error::BackwardBeforeForward {
                layer: "MaxPool2x2".into(),
            })?;
        if argmax.len() != grad_out.len() {
            return Err(Error::ShapeMismatch {
                context: "MaxPool2x2 backward".into(),
                expected: vec![argmax.len()],
                got: vec![grad_out.len()],
            });
        }
        let mut dx = vec![0.0; in_shape.iter().product()];
        for (g, &idx) in grad_out.data().iter().zip(argmax.iter()) {
            dx[idx] += g;
        }
        Ok(Tensor::from_vec(in_shape, dx))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    cache: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten::default()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "Flatten input".into(),
                expected: vec![0],
                got: input.to_vec(),
            });
        }
        Ok(vec![input[0], input[1..].iter().product()])
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        self.cache = Some(input.shape().to_vec());
        self.predict(input)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let shape = self.output_shape(input.shape())?;
        input.reshaped(shape)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let in_shape = self.cache.take().ok_or_else(|| Error::BackwardBeforeForward {
            layer: "Flatten".into(),
        })?;
        grad_out.reshaped(in_shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut relu = Relu::new();
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu.forward(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu
            .backward(&Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap())
            .unwrap();
        // Gradient at exactly zero is zero (strict mask).
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn maxpool_takes_first_max_on_ties() {
        let mut pool = MaxPool2x2::new();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let g = pool.backward(&Tensor::full(vec![1, 1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_drops_odd_edges() {
        let pool = MaxPool2x2::new();
        assert_eq!(
            pool.output_shape(&[1, 2, 7, 7]).unwrap(),
            vec![1, 2, 3, 3]
        );
    }

    #[test]
    fn flatten_round_trips_shape() {
        let mut f = Flatten::new();
        let x = Tensor::zeros(vec![2, 3, 4, 4]);
        let y = f.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 48]);
        let g = f.backward(&Tensor::zeros(vec![2, 48])).unwrap();
        assert_eq!(g.shape(), &[2, 3, 4, 4]);
    }
}
