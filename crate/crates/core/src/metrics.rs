//! Image-quality and task metrics: MSE, SSIM, PSNR, classification accuracy.
//!
//! SSIM uses a uniform 7x7 window (desk images are small); images smaller
//! than the window fall back to a single global window. The dynamic range is
//! fixed at 1, matching the [0,1] pixel convention used everywhere else.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_C1: f64 = 1e-4; // (0.01 * L)^2
const SSIM_C2: f64 = 9e-4; // (0.03 * L)^2

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricResult {
    pub mse: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub accuracy: Option<f64>,
}

/// Mean over batch and pixels of the squared difference.
pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    x.assert_shape(y.shape(), "mse")?;
    let n = x.len() as f64;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data().iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// 10*log10(1/mse) in dB with range L=1, capped at 100 dB for near-zero MSE.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Mean SSIM over batch, channels and window positions.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(ssim_impl(x, y, false)?.0)
}

/// SSIM plus its gradient with respect to `x`; used when SSIM is a training
/// objective rather than a report metric.
pub fn ssim_with_grad(x: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    let (v, g) = ssim_impl(x, y, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(x: &Tensor, y: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    x.assert_shape(y.shape(), "ssim")?;
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            context: "ssim expects NCHW batches".into(),
            expected: vec![0, 0, 0, 0],
            got: shape.to_vec(),
        });
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (win_h, win_w) = if h < SSIM_WINDOW || w < SSIM_WINDOW {
        (h, w)
    } else {
        (SSIM_WINDOW, SSIM_WINDOW)
    };
    let positions_h = h - win_h + 1;
    let positions_w = w - win_w + 1;
    let m = (win_h * win_w) as f64;
    let total_windows = (n * c * positions_h * positions_w) as f64;

    let xd = x.data();
    let yd = y.data();
    let mut grad = if want_grad { vec![0.0; xd.len()] } else { Vec::new() };
    let mut sum = 0.0;

    for plane in 0..n * c {
        let base = plane * h * w;
        for wh in 0..positions_h {
            for ww in 0..positions_w {
                let mut sx = 0.0;
                let mut sy = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                let mut sxy = 0.0;
                for dh in 0..win_h {
                    let row = base + (wh + dh) * w + ww;
                    for dw in 0..win_w {
                        let xv = xd[row + dw];
                        let yv = yd[row + dw];
                        sx += xv;
                        sy += yv;
                        sxx += xv * xv;
                        syy += yv * yv;
                        sxy += xv * yv;
                    }
                }
                let a = sx / m;
                let b = sy / m;
                let ex2 = sxx / m;
                let ey2 = syy / m;
                let exy = sxy / m;
                let vx = ex2 - a * a;
                let vy = ey2 - b * b;
                let cxy = exy - a * b;
                let n1 = 2.0 * a * b + SSIM_C1;
                let d1 = a * a + b * b + SSIM_C1;
                let n2 = 2.0 * cxy + SSIM_C2;
                let d2 = vx + vy + SSIM_C2;
                let q = n1 * n2;
                let dd = d1 * d2;
                let s = q / dd;
                sum += s;

                if want_grad {
                    let ds_da = (2.0 * b * (n2 - n1) - 2.0 * a * q / d1 + 2.0 * a * q / d2) / dd;
                    let ds_dex2 = -s / d2;
                    let ds_dexy = 2.0 * n1 / dd;
                    let scale = 1.0 / (m * total_windows);
                    for dh in 0..win_h {
                        let row = base + (wh + dh) * w + ww;
                        for dw in 0..win_w {
                            let xv = xd[row + dw];
                            let yv = yd[row + dw];
                            grad[row + dw] +=
                                scale * (ds_da + ds_dex2 * 2.0 * xv + ds_dexy * yv);
                        }
                    }
                }
            }
        }
    }
    let value = sum / total_windows;
    let grad = want_grad.then(|| Tensor::from_vec(shape.to_vec(), grad));
    Ok((value, grad))
}

/// Argmax match rate x100; ties break toward the lower class index.
pub fn accuracy(outputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let shape = outputs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "accuracy".into(),
            expected: vec![labels.len(), 0],
            got: shape.to_vec(),
        });
    }
    let (n, k) = (shape[0], shape[1]);
    let data = outputs.data();
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &data[i * k..(i + 1) * k];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / n as f64)
}

/// MSE/SSIM/PSNR triple for a reconstruction against ground truth.
pub fn image_quality(recon: &Tensor, truth: &Tensor) -> Result<MetricResult> {
    let mse_v = mse(recon, truth)?;
    Ok(MetricResult {
        mse: mse_v,
        ssim: ssim(recon, truth)?,
        psnr: psnr_from_mse(mse_v),
        accuracy: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::from_vec(vec![1, 1, h, w], (0..h * w).map(f).collect())
    }

    #[test]
    fn mse_identities() {
        let x = batch(4, 4, |i| (i as f64) / 16.0);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        let zero = Tensor::zeros(vec![1, 1, 4, 4]);
        let one = Tensor::full(vec![1, 1, 4, 4], 1.0);
        assert_eq!(mse(&zero, &one).unwrap(), 1.0);
        let a = Tensor::new(vec![1, 1, 1, 2], vec![0.1, 0.3]).unwrap();
        let b = Tensor::new(vec![1, 1, 1, 2], vec![0.2, 0.5]).unwrap();
        assert_abs_diff_eq!(mse(&a, &b).unwrap(), 0.025, epsilon = 1e-15);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let a = Tensor::zeros(vec![1, 1, 2, 2]);
        let b = Tensor::zeros(vec![1, 1, 2, 3]);
        assert!(mse(&a, &b).is_err());
    }

    #[test]
    fn psnr_identities() {
        assert_abs_diff_eq!(psnr_from_mse(0.01), 20.0, epsilon = 1e-12);
        assert_eq!(psnr_from_mse(0.0), PSNR_CAP_DB);
        // Table-5-style consistency: mse 0.050 lands near 13 dB.
        assert_abs_diff_eq!(psnr_from_mse(0.050), 13.0103, epsilon = 1e-3);
        let x = batch(8, 8, |i| (i % 5) as f64 / 5.0);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn ssim_self_is_one() {
        let x = batch(8, 8, |i| ((i * 31 % 17) as f64) / 17.0);
        assert_abs_diff_eq!(ssim(&x, &x).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_is_symmetric() {
        let x = batch(9, 9, |i| ((i * 13 % 23) as f64) / 23.0);
        let y = batch(9, 9, |i| ((i * 7 % 19) as f64) / 19.0);
        assert_abs_diff_eq!(
            ssim(&x, &y).unwrap(),
            ssim(&y, &x).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn constant_images_match_closed_form() {
        // Zero variance: SSIM = (2*0.16 + C1) / (0.04 + 0.64 + C1).
        let x = Tensor::full(vec![1, 1, 8, 8], 0.2);
        let y = Tensor::full(vec![1, 1, 8, 8], 0.8);
        let expected = (2.0 * 0.2 * 0.8 + 1e-4) / (0.04 + 0.64 + 1e-4);
        assert_abs_diff_eq!(ssim(&x, &y).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.4707, epsilon = 1e-3);
    }

    #[test]
    fn inverted_high_contrast_image_scores_negative() {
        // Checkerboard against its negation: covariance term flips sign.
        let x = batch(8, 8, |i| ((i / 8 + i % 8) % 2) as f64);
        let y = Tensor::from_vec(
            x.shape().to_vec(),
            x.data().iter().map(|v| 1.0 - v).collect(),
        );
        assert!(ssim(&x, &y).unwrap() < 0.0);
    }

    #[test]
    fn small_images_use_global_window() {
        let x = Tensor::full(vec![1, 1, 3, 3], 0.2);
        let y = Tensor::full(vec![1, 1, 3, 3], 0.8);
        let expected = (2.0 * 0.2 * 0.8 + 1e-4) / (0.04 + 0.64 + 1e-4);
        assert_abs_diff_eq!(ssim(&x, &y).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn translation_shifts_mse_by_square() {
        let x = batch(8, 8, |i| 0.2 + ((i % 4) as f64) * 0.1);
        let shifted = Tensor::from_vec(
            x.shape().to_vec(),
            x.data().iter().map(|v| v + 0.1).collect(),
        );
        assert_abs_diff_eq!(mse(&shifted, &x).unwrap(), 0.01, epsilon = 1e-12);
    }

    #[test]
    fn accuracy_counts_and_tie_breaks() {
        let perfect = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(accuracy(&perfect, &[0, 2]).unwrap(), 100.0);
        let uniform = Tensor::zeros(vec![4, 3]);
        // Ties pick class 0.
        assert_eq!(accuracy(&uniform, &[0, 1, 2, 0]).unwrap(), 50.0);
        let three_of_four = Tensor::new(
            vec![4, 2],
            vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        assert_eq!(accuracy(&three_of_four, &[0, 1, 0, 1]).unwrap(), 75.0);
    }
}
