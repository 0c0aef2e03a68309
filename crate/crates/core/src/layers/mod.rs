//! Fixed-operator network layers with reverse-mode gradients.
//!
//! The operator set is exactly what the simulated models need: Dense, Conv2D,
//! ConvTranspose2D, ReLU, Sigmoid, MaxPool2x2 and Flatten, composed
//! sequentially. Inversion decoders additionally use residual conv pairs,
//! expressed at the network level as a `Block::Residual` wrapper around plain
//! layers.

mod conv;
mod dense;
mod simple;

pub use conv::{Conv2d, ConvTranspose2d};
pub use dense::Dense;
pub use simple::{Flatten, MaxPool2x2, Relu, Sigmoid};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    Relu(Relu),
    Sigmoid(Sigmoid),
    MaxPool2x2(MaxPool2x2),
    Flatten(Flatten),
}

impl Layer {
    pub fn name(&self) -> String {
        match self {
            Layer::Dense(l) => l.name(),
            Layer::Conv2d(l) => l.name(),
            Layer::ConvTranspose2d(l) => l.name(),
            Layer::Relu(_) => "ReLU".into(),
            Layer::Sigmoid(_) => "Sigmoid".into(),
            Layer::MaxPool2x2(_) => "MaxPool2x2".into(),
            Layer::Flatten(_) => "Flatten".into(),
        }
    }

    /// Output shape as a pure function of the input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(l) => l.output_shape(input),
            Layer::Conv2d(l) => l.output_shape(input),
            Layer::ConvTranspose2d(l) => l.output_shape(input),
            Layer::Relu(_) | Layer::Sigmoid(_) => Ok(input.to_vec()),
            Layer::MaxPool2x2(l) => l.output_shape(input),
            Layer::Flatten(l) => l.output_shape(input),
        }
    }

    /// Forward pass that caches what backward needs.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.forward(input),
            Layer::Conv2d(l) => l.forward(input),
            Layer::ConvTranspose2d(l) => l.forward(input),
            Layer::Relu(l) => l.forward(input),
            Layer::Sigmoid(l) => l.forward(input),
            Layer::MaxPool2x2(l) => l.forward(input),
            Layer::Flatten(l) => l.forward(input),
        }
    }

    /// Cache-free forward for evaluation paths.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.predict(input),
            Layer::Conv2d(l) => l.predict(input),
            Layer::ConvTranspose2d(l) => l.predict(input),
            Layer::Relu(l) => l.predict(input),
            Layer::Sigmoid(l) => l.predict(input),
            Layer::MaxPool2x2(l) => l.predict(input),
            Layer::Flatten(l) => l.predict(input),
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    /// Consumes the forward cache, so it errors when called twice.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(l) => l.backward(grad_out),
            Layer::Conv2d(l) => l.backward(grad_out),
            Layer::ConvTranspose2d(l) => l.backward(grad_out),
            Layer::Relu(l) => l.backward(grad_out),
            Layer::Sigmoid(l) => l.backward(grad_out),
            Layer::MaxPool2x2(l) => l.backward(grad_out),
            Layer::Flatten(l) => l.backward(grad_out),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::ConvTranspose2d(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ConvTranspose2d(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            Layer::Dense(_) | Layer::Conv2d(_) | Layer::ConvTranspose2d(_)
        )
    }

    pub fn frozen(&self) -> bool {
        match self {
            Layer::Dense(l) => l.frozen,
            Layer::Conv2d(l) => l.frozen,
            Layer::ConvTranspose2d(l) => l.frozen,
            _ => false,
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        match self {
            Layer::Dense(l) => l.frozen = frozen,
            Layer::Conv2d(l) => l.frozen = frozen,
            Layer::ConvTranspose2d(l) => l.frozen = frozen,
            _ => {}
        }
    }
}

/// One unit of a network: either a plain layer or a residual group
/// computing `x + f(x)` with a shape-preserving body.
#[derive(Debug, Clone)]
pub enum Block {
    Single(Layer),
    Residual(Vec<Layer>),
}

impl Block {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Block::Single(l) => l.output_shape(input),
            Block::Residual(layers) => {
                let mut shape = input.to_vec();
                for l in layers {
                    shape = l.output_shape(&shape)?;
                }
                if shape != input {
                    return Err(Error::ShapeMismatch {
                        context: "residual block body must preserve shape".into(),
                        expected: input.to_vec(),
                        got: shape,
                    });
                }
                Ok(shape)
            }
        }
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        match self {
            Block::Single(l) => l.forward(input),
            Block::Residual(layers) => {
                let mut cur = input.clone();
                for l in layers.iter_mut() {
                    cur = l.forward(&cur)?;
                }
                cur.assert_shape(input.shape(), "residual block output")?;
                for (o, i) in cur.data_mut().iter_mut().zip(input.data().iter()) {
                    *o += i;
                }
                Ok(cur)
            }
        }
    }

    fn predict(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Block::Single(l) => l.predict(input),
            Block::Residual(layers) => {
                let mut cur = input.clone();
                for l in layers {
                    cur = l.predict(&cur)?;
                }
                cur.assert_shape(input.shape(), "residual block output")?;
                for (o, i) in cur.data_mut().iter_mut().zip(input.data().iter()) {
                    *o += i;
                }
                Ok(cur)
            }
        }
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        match self {
            Block::Single(l) => l.backward(grad_out),
            Block::Residual(layers) => {
                let mut g = grad_out.clone();
                for l in layers.iter_mut().rev() {
                    g = l.backward(&g)?;
                }
                // Skip path contributes the output gradient unchanged.
                g.add_scaled(grad_out, 1.0)?;
                Ok(g)
            }
        }
    }

    fn layers(&self) -> &[Layer] {
        match self {
            Block::Single(l) => std::slice::from_ref(l),
            Block::Residual(layers) => layers,
        }
    }

    fn layers_mut(&mut self) -> &mut [Layer] {
        match self {
            Block::Single(l) => std::slice::from_mut(l),
            Block::Residual(layers) => layers,
        }
    }
}

/// A sequential stack of blocks. This is the unit clients, servers and
/// inversion models are built from.
#[derive(Debug, Clone, Default)]
pub struct Network {
    pub blocks: Vec<Block>,
}

impl Network {
    pub fn new(blocks: Vec<Block>) -> Self {
        Network { blocks }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Network {
            blocks: layers.into_iter().map(Block::Single).collect(),
        }
    }

    pub fn push(&mut self, layer: Layer) {
        self.blocks.push(Block::Single(layer));
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for b in &self.blocks {
            shape = b.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut cur = input.clone();
        for b in self.blocks.iter_mut() {
            cur = b.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut cur = input.clone();
        for b in &self.blocks {
            cur = b.predict(&cur)?;
        }
        Ok(cur)
    }

    /// Back-propagates `grad_out`, accumulating parameter gradients, and
    /// returns the gradient with respect to the network input.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for (p, _) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// All parameter tensors in canonical (block, layer, slot) order,
    /// together with the owning layer's frozen flag.
    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, bool)> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut() {
            for l in b.layers_mut() {
                let frozen = l.frozen();
                for p in l.params_mut() {
                    out.push((p, frozen));
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.blocks
            .iter()
            .flat_map(|b| b.layers().iter().flat_map(|l| l.params()))
            .collect()
    }

    /// Stable `name -> tensor` listing used by checkpoints and averaging.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Single(l) => collect_layer_params(&mut out, format!("{bi}"), l),
                Block::Residual(layers) => {
                    for (li, l) in layers.iter().enumerate() {
                        collect_layer_params(&mut out, format!("{bi}.{li}"), l);
                    }
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (bi, b) in self.blocks.iter_mut().enumerate() {
            match b {
                Block::Single(l) => collect_layer_params_mut(&mut out, format!("{bi}"), l),
                Block::Residual(layers) => {
                    for (li, l) in layers.iter_mut().enumerate() {
                        collect_layer_params_mut(&mut out, format!("{bi}.{li}"), l);
                    }
                }
            }
        }
        out
    }

    /// Copy parameter values (not gradients) from another structurally
    /// identical network.
    pub fn copy_params_from(&mut self, other: &Network) -> Result<()> {
        let src = other.params();
        let mut dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(Error::InvalidParam(format!(
                "parameter count mismatch: {} vs {}",
                dst.len(),
                src.len()
            )));
        }
        for ((d, _), s) in dst.iter_mut().zip(src.iter()) {
            d.assert_shape(s.shape(), "copy_params_from")?;
            d.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    pub fn weighted_layer_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.layers().iter())
            .filter(|l| l.is_weighted())
            .count()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for b in self.blocks.iter_mut() {
            for l in b.layers_mut() {
                l.set_frozen(frozen);
            }
        }
    }

    /// Append all blocks of `other` to this network.
    pub fn extend(&mut self, other: Network) {
        self.blocks.extend(other.blocks);
    }
}

fn collect_layer_params<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: String, l: &'a Layer) {
    let slots = ["weight", "bias"];
    for (p, slot) in l.params().into_iter().zip(slots.iter()) {
        out.push((format!("{prefix}.{slot}"), p));
    }
}

fn collect_layer_params_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: String,
    l: &'a mut Layer,
) {
    let slots = ["weight", "bias"];
    for (p, slot) in l.params_mut().into_iter().zip(slots.iter()) {
        out.push((format!("{prefix}.{slot}"), p));
    }
}

/// Bitwise parameter equality between two networks.
pub fn params_bits_equal(a: &Network, b: &Network) -> bool {
    let pa = a.params();
    let pb = b.params();
    pa.len() == pb.len()
        && pa
            .iter()
            .zip(pb.iter())
            .all(|(x, y)| crate::tensor::bits_equal(x, y))
}

pub(crate) fn dims4(shape: &[usize], context: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            context: format!("{context}: expected NCHW input"),
            expected: vec![0, 0, 0, 0],
            got: shape.to_vec(),
        });
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}
