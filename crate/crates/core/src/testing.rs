//! Test-support utilities: finite-difference gradient oracles, a centralized
//! training oracle and IDX fixture builders.
//!
//! These live in the library (not under `#[cfg(test)]`) so integration tests
//! and the acceptance suite can share them. Nothing here is used by the
//! simulator itself.

use rand::Rng;

use crate::error::Result;
use crate::layers::Network;
use crate::rng::substream;
use crate::tensor::Tensor;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error tolerance for gradient checks.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error with a floor so that near-zero pairs compare absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

/// Check every parameter gradient and the input gradient of `net` against
/// central finite differences of the scalar loss `sum(probe * net(x))`.
///
/// The probe vector is drawn from `seed`, so the check covers generic
/// directions rather than a single output element.
pub fn gradcheck_network(net: &Network, input: &Tensor, seed: u64) -> Result<GradCheckReport> {
    let mut rng = substream(seed, "gradcheck-probe", 0);
    let out_shape = net.output_shape(input.shape())?;
    let out_len: usize = out_shape.iter().product();
    let probe: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let loss_of = |net: &Network, x: &Tensor| -> Result<f64> {
        let y = net.predict(x)?;
        Ok(y.data().iter().zip(probe.iter()).map(|(a, b)| a * b).sum())
    };

    // Analytic pass.
    let mut work = net.clone();
    work.zero_grad();
    let y = work.forward(input)?;
    let probe_t = Tensor::from_vec(y.shape().to_vec(), probe.clone());
    let input_grad = work.backward(&probe_t)?;
    let analytic_params: Vec<Vec<f64>> = work
        .params()
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let mut checked = 0usize;
    let mut max_rel = 0.0f64;

    // Parameter gradients.
    let mut fd_net = net.clone();
    let n_params = fd_net.params_mut().len();
    for pi in 0..n_params {
        let len = fd_net.params_mut()[pi].0.len();
        for ei in 0..len {
            let orig = fd_net.params_mut()[pi].0.data()[ei];
            fd_net.params_mut()[pi].0.data_mut()[ei] = orig + FD_STEP;
            let plus = loss_of(&fd_net, input)?;
            fd_net.params_mut()[pi].0.data_mut()[ei] = orig - FD_STEP;
            let minus = loss_of(&fd_net, input)?;
            fd_net.params_mut()[pi].0.data_mut()[ei] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            max_rel = max_rel.max(relative_error(analytic_params[pi][ei], fd));
            checked += 1;
        }
    }

    // Input gradient.
    let mut x = input.clone();
    for ei in 0..x.len() {
        let orig = x.data()[ei];
        x.data_mut()[ei] = orig + FD_STEP;
        let plus = loss_of(net, &x)?;
        x.data_mut()[ei] = orig - FD_STEP;
        let minus = loss_of(net, &x)?;
        x.data_mut()[ei] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        max_rel = max_rel.max(relative_error(input_grad.data()[ei], fd));
        checked += 1;
    }

    Ok(GradCheckReport {
        checked,
        max_rel_err: max_rel,
    })
}

/// Finite-difference check of a scalar function with a hand-derived gradient,
/// e.g. SSIM or distance correlation.
pub fn gradcheck_scalar(
    f: &dyn Fn(&Tensor) -> f64,
    x: &Tensor,
    analytic: &Tensor,
) -> GradCheckReport {
    let mut work = x.clone();
    let mut max_rel = 0.0f64;
    for ei in 0..work.len() {
        let orig = work.data()[ei];
        work.data_mut()[ei] = orig + FD_STEP;
        let plus = f(&work);
        work.data_mut()[ei] = orig - FD_STEP;
        let minus = f(&work);
        work.data_mut()[ei] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        max_rel = max_rel.max(relative_error(analytic.data()[ei], fd));
    }
    GradCheckReport {
        checked: x.len(),
        max_rel_err: max_rel,
    }
}

/// Input filler that keeps values away from ReLU kinks and max-pool ties so
/// finite differences stay valid.
pub fn well_conditioned_input(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = substream(seed, "gradcheck-input", 1);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let mut v: f64 = rng.gen_range(-1.0..1.0);
            if v.abs() < 0.05 {
                v = if v >= 0.0 { v + 0.05 } else { v - 0.05 };
            }
            // Per-element jitter breaks pooling ties.
            v + (i as f64) * 1e-3
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Centralized training oracle: the unsplit network trained with one SGD on
/// the same shard, batch plan and learning-rate schedule as a single SFL
/// client. Protocol-equivalence tests compare whole trajectories against it.
pub struct CentralizedOracle {
    pub net: Network,
    pub opt: crate::optim::Sgd,
    rng: rand_chacha::ChaCha8Rng,
}

impl CentralizedOracle {
    /// `seed` must be the SFL run seed; the oracle mirrors client stream 0.
    pub fn new(net: Network, lr: f64, momentum: f64, seed: u64) -> Self {
        CentralizedOracle {
            net,
            opt: crate::optim::Sgd::new(lr, momentum).expect("oracle lr"),
            rng: substream(seed, "client", 0),
        }
    }

    /// One epoch over the shard; returns the mean batch loss.
    pub fn train_epoch(
        &mut self,
        dataset: &crate::data::Dataset,
        shard: &[usize],
        batch_size: usize,
        lr: f64,
    ) -> Result<f64> {
        self.opt.lr = lr;
        let plan = crate::protocol::epoch_batch_plan(&mut self.rng, shard, batch_size);
        let mut sum = 0.0;
        let n = plan.len();
        for indices in plan {
            let images = dataset.batch_images(&indices);
            let labels = dataset.batch_labels(&indices);
            self.net.zero_grad();
            let logits = self.net.forward(&images)?;
            let (loss, grad) = crate::loss::softmax_cross_entropy(&logits, &labels)?;
            self.net.backward(&grad)?;
            self.opt.step(&mut self.net)?;
            sum += loss;
        }
        Ok(sum / n.max(1) as f64)
    }
}

/// In-memory IDX image payload (big-endian magic 0x00000803).
pub fn idx_image_bytes(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        assert_eq!(img.len(), rows * cols);
        out.extend_from_slice(img);
    }
    out
}

/// In-memory IDX label payload (big-endian magic 0x00000801).
pub fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
