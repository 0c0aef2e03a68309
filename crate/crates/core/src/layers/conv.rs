//! Direct 2D convolution and its transpose.
//!
//! Weight layouts follow the usual convention: Conv2d stores
//! `[out_ch, in_ch, k, k]`, ConvTranspose2d stores `[in_ch, out_ch, k, k]`.
//! With that layout the transpose's forward pass is exactly the input
//! gradient of a convolution reusing the same weight buffer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::dims4;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
}

pub(crate) fn kaiming_dense(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    kaiming_uniform(rng, vec![rows, cols], cols)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub frozen: bool,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Tensor,
        bias: Tensor,
    ) -> Self {
        debug_assert!(kernel >= 1 && stride >= 1);
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
            frozen: false,
            cache: None,
        }
    }

    /// Kaiming-uniform weights (fan-in = in_channels * k^2), zero bias.
    pub fn kaiming(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = kaiming_uniform(
            rng,
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
        );
        let bias = Tensor::zeros(vec![out_channels]);
        Conv2d::new(in_channels, out_channels, kernel, stride, padding, weight, bias)
    }

    pub fn name(&self) -> String {
        format!(
            "Conv2d({}->{},k{},s{},p{})",
            self.in_channels, self.out_channels, self.kernel, self.stride, self.padding
        )
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (n, c, h, w) = dims4(input, "Conv2d")?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: format!("{} input channels", self.name()),
                expected: vec![self.in_channels],
                got: vec![c],
            });
        }
        let ho = conv_out(h, self.kernel, self.stride, self.padding);
        let wo = conv_out(w, self.kernel, self.stride, self.padding);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(vec![n, self.out_channels, ho, wo]),
            _ => Err(Error::SpatialCollapse {
                layer: self.name(),
                input: input.to_vec(),
            }),
        }
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.predict(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(input.shape())?;
        let (n, _, h, w) = dims4(input.shape(), "Conv2d")?;
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (cin, cout) = (self.in_channels, self.out_channels);
        let x = input.data();
        let wt = self.weight.data();
        let b = self.bias.data();

        let mut out = vec![0.0; n * cout * ho * wo];
        for ni in 0..n {
            for oc in 0..cout {
                let o_base = (ni * cout + oc) * ho * wo;
                for oh in 0..ho {
                    let ih_off = (oh * s) as isize - p as isize;
                    let (kh0, kh1) = tap_range(ih_off, k, h);
                    for ow in 0..wo {
                        let iw_off = (ow * s) as isize - p as isize;
                        let (kw0, kw1) = tap_range(iw_off, k, w);
                        let mut acc = b[oc];
                        for ic in 0..cin {
                            let x_base = (ni * cin + ic) * h * w;
                            let w_base = (oc * cin + ic) * k * k;
                            for kh in kh0..kh1 {
                                let ih = (ih_off + kh as isize) as usize;
                                let x_row = x_base + ih * w;
                                let w_row = w_base + kh * k;
                                for kw in kw0..kw1 {
                                    let iw = (iw_off + kw as isize) as usize;
                                    acc += wt[w_row + kw] * x[x_row + iw];
                                }
                            }
                        }
                        out[o_base + oh * wo + ow] = acc;
                    }
                }
            }
        }
        Ok(Tensor::from_vec(out_shape, out))
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or_else(|| Error::BackwardBeforeForward {
            layer: self.name(),
        })?;
        let out_shape = self.output_shape(input.shape())?;
        grad_out.assert_shape(&out_shape, &format!("{} backward", self.name()))?;

        let (n, _, h, w) = dims4(input.shape(), "Conv2d")?;
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (cin, cout) = (self.in_channels, self.out_channels);
        let x = input.data();
        let go = grad_out.data();
        let wt = self.weight.data().to_vec();

        let mut dx = vec![0.0; x.len()];
        {
            let dw = self.weight.grad_mut();
            for ni in 0..n {
                for oc in 0..cout {
                    let o_base = (ni * cout + oc) * ho * wo;
                    for oh in 0..ho {
                        let ih_off = (oh * s) as isize - p as isize;
                        let (kh0, kh1) = tap_range(ih_off, k, h);
                        for ow in 0..wo {
                            let iw_off = (ow * s) as isize - p as isize;
                            let (kw0, kw1) = tap_range(iw_off, k, w);
                            let g = go[o_base + oh * wo + ow];
                            if g == 0.0 {
                                continue;
                            }
                            for ic in 0..cin {
                                let x_base = (ni * cin + ic) * h * w;
                                let w_base = (oc * cin + ic) * k * k;
                                for kh in kh0..kh1 {
                                    let ih = (ih_off + kh as isize) as usize;
                                    let x_row = x_base + ih * w;
                                    let w_row = w_base + kh * k;
                                    for kw in kw0..kw1 {
                                        let iw = (iw_off + kw as isize) as usize;
                                        dw[w_row + kw] += g * x[x_row + iw];
                                        dx[x_row + iw] += g * wt[w_row + kw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        {
            let db = self.bias.grad_mut();
            for ni in 0..n {
                for oc in 0..cout {
                    let o_base = (ni * cout + oc) * ho * wo;
                    db[oc] += go[o_base..o_base + ho * wo].iter().sum::<f64>();
                }
            }
        }
        Ok(Tensor::from_vec(input.shape().to_vec(), dx))
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub frozen: bool,
    cache: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Tensor,
        bias: Tensor,
    ) -> Self {
        debug_assert!(kernel >= 1 && stride >= 1);
        ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
            frozen: false,
            cache: None,
        }
    }

    pub fn kaiming(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = kaiming_uniform(
            rng,
            vec![in_channels, out_channels, kernel, kernel],
            fan_in,
        );
        let bias = Tensor::zeros(vec![out_channels]);
        ConvTranspose2d::new(in_channels, out_channels, kernel, stride, padding, weight, bias)
    }

    pub fn name(&self) -> String {
        format!(
            "ConvTranspose2d({}->{},k{},s{},p{})",
            self.in_channels, self.out_channels, self.kernel, self.stride, self.padding
        )
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (n, c, h, w) = dims4(input, "ConvTranspose2d")?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: format!("{} input channels", self.name()),
                expected: vec![self.in_channels],
                got: vec![c],
            });
        }
        let ho = (h - 1) * self.stride + self.kernel;
        let wo = (w - 1) * self.stride + self.kernel;
        if ho <= 2 * self.padding || wo <= 2 * self.padding {
            return Err(Error::SpatialCollapse {
                layer: self.name(),
                input: input.to_vec(),
            });
        }
        Ok(vec![
            n,
            self.out_channels,
            ho - 2 * self.padding,
            wo - 2 * self.padding,
        ])
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.predict(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(input.shape())?;
        let (n, _, h, w) = dims4(input.shape(), "ConvTranspose2d")?;
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (cin, cout) = (self.in_channels, self.out_channels);
        let x = input.data();
        let wt = self.weight.data();
        let b = self.bias.data();

        let mut out = vec![0.0; n * cout * ho * wo];
        for (oc, &bv) in b.iter().enumerate() {
            if bv != 0.0 {
                for ni in 0..n {
                    let o_base = (ni * cout + oc) * ho * wo;
                    out[o_base..o_base + ho * wo].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        for ni in 0..n {
            for ic in 0..cin {
                let x_base = (ni * cin + ic) * h * w;
                for ih in 0..h {
                    let oh_off = (ih * s) as isize - p as isize;
                    for iw in 0..w {
                        let ow_off = (iw * s) as isize - p as isize;
                        let v = x[x_base + ih * w + iw];
                        if v == 0.0 {
                            continue;
                        }
                        for oc in 0..cout {
                            let o_base = (ni * cout + oc) * ho * wo;
                            let w_base = (ic * cout + oc) * k * k;
                            for kh in 0..k {
                                let oh = oh_off + kh as isize;
                                if oh < 0 || oh >= ho as isize {
                                    continue;
                                }
                                let o_row = o_base + oh as usize * wo;
                                let w_row = w_base + kh * k;
                                for kw in 0..k {
                                    let ow = ow_off + kw as isize;
                                    if ow < 0 || ow >= wo as isize {
                                        continue;
                                    }
                                    out[o_row + ow as usize] += v * wt[w_row + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(out_shape, out))
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self.cache.take().ok_or_else(|| Error::BackwardBeforeForward {
            layer: self.name(),
        })?;
        let out_shape = self.output_shape(input.shape())?;
        grad_out.assert_shape(&out_shape, &format!("{} backward", self.name()))?;

        let (n, _, h, w) = dims4(input.shape(), "ConvTranspose2d")?;
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (cin, cout) = (self.in_channels, self.out_channels);
        let x = input.data();
        let go = grad_out.data();
        let wt = self.weight.data().to_vec();

        let mut dx = vec![0.0; x.len()];
        {
            let dw = self.weight.grad_mut();
            for ni in 0..n {
                for ic in 0..cin {
                    let x_base = (ni * cin + ic) * h * w;
                    for ih in 0..h {
                        let oh_off = (ih * s) as isize - p as isize;
                        for iw in 0..w {
                            let ow_off = (iw * s) as isize - p as isize;
                            let xv = x[x_base + ih * w + iw];
                            let mut acc = 0.0;
                            for oc in 0..cout {
                                let o_base = (ni * cout + oc) * ho * wo;
                                let w_base = (ic * cout + oc) * k * k;
                                for kh in 0..k {
                                    let oh = oh_off + kh as isize;
                                    if oh < 0 || oh >= ho as isize {
                                        continue;
                                    }
                                    let o_row = o_base + oh as usize * wo;
                                    let w_row = w_base + kh * k;
                                    for kw in 0..k {
                                        let ow = ow_off + kw as isize;
                                        if ow < 0 || ow >= wo as isize {
                                            continue;
                                        }
                                        let g = go[o_row + ow as usize];
                                        acc += g * wt[w_row + kw];
                                        dw[w_row + kw] += g * xv;
                                    }
                                }
                            }
                            dx[x_base + ih * w + iw] = acc;
                        }
                    }
                }
            }
        }
        {
            let db = self.bias.grad_mut();
            for ni in 0..n {
                for oc in 0..cout {
                    let o_base = (ni * cout + oc) * ho * wo;
                    db[oc] += go[o_base..o_base + ho * wo].iter().sum::<f64>();
                }
            }
        }
        Ok(Tensor::from_vec(input.shape().to_vec(), dx))
    }
}

fn conv_out(size: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = size + 2 * p;
    if padded < k {
        return None;
    }
    Some((padded - k) / s + 1)
}

/// Kernel tap range [k0, k1) keeping `offset + tap` inside [0, size).
fn tap_range(offset: isize, k: usize, size: usize) -> (usize, usize) {
    let k0 = if offset < 0 { (-offset) as usize } else { 0 };
    let k1 = if offset + k as isize > size as isize {
        (size as isize - offset).max(0) as usize
    } else {
        k
    };
    (k0.min(k), k1.min(k))
}
