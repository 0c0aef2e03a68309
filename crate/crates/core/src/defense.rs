//! ResSFL defenses and the baselines they are compared against.
//!
//! Attacker-aware training runs the min-max game of the protocol: every f-th
//! step the client's local inversion model D^i climbs the SSIM of its
//! reconstructions (phase A, client and server frozen), and every step the
//! client/server pair descends cross-entropy plus lambda times that SSIM with
//! D^i frozen (phase B). Resistance transfer re-uses a pre-trained resistant
//! extractor to initialize SFL on a new task, optionally with a lite version
//! of the same game (L0 simulator, f=5, low client learning rate).
//!
//! The baselines are activation perturbations applied on a trained model
//! (Laplacian noise, dropout masking, top-k pruning, FGSM adversarial noise)
//! and distance-correlation regularization applied during training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::ActivationFilter;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Network;
use crate::loss::softmax_cross_entropy;
use crate::metrics::ssim_with_grad;
use crate::optim::{Adam, Sgd};
use crate::protocol::{
    Batch, ClientState, DefenseHook, EpochResult, SflParams, SflRun, SimulatedAttacker,
};
use crate::rng::{laplace, substream};
use crate::tensor::Tensor;
use crate::zoo::{
    build_inversion_model, build_split_classifier, insert_bottleneck, InversionTier, SplitModel,
};

/// Fine-tuning learning rates: low on the transferred client part, higher on
/// the rest of the model.
pub const TRANSFER_CLIENT_LR: f64 = 0.005;
pub const TRANSFER_OTHER_LR: f64 = 0.02;
pub const TRANSFER_SIM_UPDATE_FREQ: u64 = 5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AwareTrainConfig {
    /// Strength of the inversion score in the client/server objective.
    pub lambda: f64,
    /// Tier of the simulated attacker D^i.
    pub sim_tier: InversionTier,
    /// Train D^i once every `update_freq` steps.
    pub update_freq: u64,
    pub base_width: usize,
    pub seed: u64,
}

impl AwareTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidParam(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.update_freq == 0 {
            return Err(Error::InvalidParam("update_freq must be >= 1".into()));
        }
        Ok(())
    }
}

/// The attacker-aware training hook. Per-client simulator state lives in
/// `ClientState::sim`; this object only carries the configuration.
pub struct AwareDefense {
    pub cfg: AwareTrainConfig,
}

impl AwareDefense {
    pub fn new(cfg: AwareTrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AwareDefense { cfg })
    }

    fn ensure_sim(&self, client: &mut ClientState, act: &Tensor, batch: &Batch) -> Result<()> {
        if client.sim.is_some() {
            return Ok(());
        }
        let a = act.shape();
        let i = batch.images.shape();
        let net = build_inversion_model(
            self.cfg.sim_tier,
            &[a[1], a[2], a[3]],
            &[i[1], i[2], i[3]],
            self.cfg.base_width,
            substream(self.cfg.seed, "sim-init", client.id as u64).gen(),
        )?;
        client.sim = Some(SimulatedAttacker {
            net,
            opt: Adam::new(crate::attack::INVERSION_LR)?,
            steps: 0,
            phase_a_runs: 0,
        });
        Ok(())
    }

    /// Phase A: one SSIM-ascent step on D^i with the client model frozen.
    /// Returns the pre-update score.
    pub fn phase_a(&self, client: &mut ClientState, act: &Tensor, batch: &Batch) -> Result<f64> {
        let sim = client.sim.as_mut().expect("simulator initialized");
        sim.net.zero_grad();
        let recon = sim.net.forward(act)?;
        let (score, d_recon) = ssim_with_grad(&recon, &batch.images)?;
        if !score.is_finite() {
            return Err(Error::NanLoss {
                epoch: 0,
                client: client.id,
                step: sim.steps as usize,
                phase: "attacker-aware phase A (SSIM ascent)".into(),
            });
        }
        // Ascend: minimize -SSIM.
        let mut neg = d_recon;
        neg.data_mut().iter_mut().for_each(|v| *v = -*v);
        sim.net.backward(&neg)?;
        sim.opt.step(&mut sim.net)?;
        sim.phase_a_runs += 1;
        Ok(score)
    }
}

impl DefenseHook for AwareDefense {
    fn before_task_step(
        &self,
        client: &mut ClientState,
        activation: &Tensor,
        batch: &Batch,
    ) -> Result<()> {
        self.ensure_sim(client, activation, batch)?;
        let due = {
            let sim = client.sim.as_ref().expect("simulator initialized");
            sim.steps % self.cfg.update_freq == 0
        };
        if due {
            self.phase_a(client, activation, batch)?;
        }
        client.sim.as_mut().expect("simulator initialized").steps += 1;
        Ok(())
    }

    fn activation_grad_extra(
        &self,
        client: &mut ClientState,
        activation: &Tensor,
        batch: &Batch,
    ) -> Result<Option<Tensor>> {
        if self.cfg.lambda == 0.0 {
            return Ok(None);
        }
        let lambda = self.cfg.lambda;
        let sim = client.sim.as_mut().expect("simulator initialized");
        // D^i stays fixed here: its gradients are discarded by the next
        // zero_grad and its optimizer never steps in this phase.
        sim.net.zero_grad();
        let recon = sim.net.forward(activation)?;
        let (score, d_recon) = ssim_with_grad(&recon, &batch.images)?;
        if !score.is_finite() {
            return Err(Error::NanLoss {
                epoch: 0,
                client: client.id,
                step: sim.steps as usize,
                phase: "attacker-aware phase B (SSIM regularizer)".into(),
            });
        }
        let mut grad = sim.net.backward(&d_recon)?;
        grad.data_mut().iter_mut().for_each(|v| *v *= lambda);
        Ok(Some(grad))
    }
}

/// One explicit min-max batch step (Alg.-style lines 8-13): phase A on
/// schedule, then the cross-entropy + lambda*SSIM task step. The protocol
/// loop runs exactly this sequence via the hook; this entry point exists for
/// direct stepping in tests and tools.
pub fn attacker_aware_step(
    client: &mut ClientState,
    server_model: &mut Network,
    server_opt: &mut Sgd,
    data: &crate::protocol::SflData,
    indices: &[usize],
    defense: &AwareDefense,
) -> Result<f64> {
    let batch = data.client_batch(client, indices)?;
    client.model.zero_grad();
    let act = client.forward_batch(&batch)?;
    defense.before_task_step(client, &act, &batch)?;

    server_model.zero_grad();
    let logits = server_model.forward(&act)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, &batch.labels)?;
    let mut act_grad = server_model.backward(&dlogits)?;
    server_opt.step(server_model)?;

    if let Some(extra) = defense.activation_grad_extra(client, &act, &batch)? {
        act_grad.add_scaled(&extra, 1.0)?;
    }
    client.model.backward(&act_grad)?;
    client.opt.step(&mut client.model)?;
    Ok(loss)
}

/// Expert pre-training (step A): a single client runs attacker-aware training
/// with a strong simulator on every step (f = 1), bottleneck included, and
/// emits the resistant client-part checkpoint.
pub fn attacker_aware_pretrain(
    model: SplitModel,
    dataset: Dataset,
    mut sfl: SflParams,
    mut aware: AwareTrainConfig,
) -> Result<(SflRun, Vec<EpochResult>, Checkpoint)> {
    if model.bottleneck.is_none() {
        eprintln!("warning: pre-training without bottleneck layers (ablation setting)");
    }
    sfl.num_clients = 1;
    aware.update_freq = 1;
    let meta = CheckpointMeta {
        arch: model.arch.clone(),
        cut_layer: model.cut_layer,
        bottleneck: model.bottleneck,
        epoch: sfl.total_epochs,
        seed: sfl.seed,
        lambda: Some(aware.lambda),
        input_shape: Some(model.input_shape),
    };
    let defense = AwareDefense::new(aware)?;
    let mut run = SflRun::new(model, dataset, sfl)?;
    let results = run.run(&defense)?;
    let (client_final, _) = run.final_model()?;
    let ckpt = Checkpoint::from_network(&client_final, meta);
    Ok((run, results, ckpt))
}

/// How the pre-trained extractor is used on the new task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferStrategy {
    /// Client part frozen (zero learning rate), plain SFL on the server.
    Freeze,
    /// Low client learning rate, no attacker-aware regularization.
    SimpleFinetune,
    /// Low client learning rate plus the lite min-max game (L0, f = 5).
    AwareFinetune,
}

/// Rebuild the pre-trained client model for the target task and run SFL with
/// the requested strategy. The checkpoint's architecture metadata drives the
/// rebuild; a target input shape that differs from the pre-training shape is
/// rejected.
pub fn resistance_transfer(
    ckpt: &Checkpoint,
    dataset: Dataset,
    strategy: TransferStrategy,
    mut sfl: SflParams,
    lambda: f64,
) -> Result<(SflRun, Vec<EpochResult>)> {
    let image_shape = dataset.image_shape();
    if let Some(expected) = ckpt.meta.input_shape {
        if expected != image_shape {
            return Err(Error::ShapeMismatch {
                context: "resistance_transfer target input".into(),
                expected: expected.to_vec(),
                got: image_shape.to_vec(),
            });
        }
    }
    let mut model = build_split_classifier(
        &ckpt.meta.arch,
        ckpt.meta.cut_layer,
        &image_shape,
        dataset.num_classes,
        sfl.seed,
    )?;
    if let Some(b) = ckpt.meta.bottleneck {
        model = insert_bottleneck(model, b, sfl.seed)?;
    }
    ckpt.load_into(&mut model.client)?;

    sfl.client_lr = match strategy {
        TransferStrategy::Freeze => 0.0,
        _ => TRANSFER_CLIENT_LR,
    };
    sfl.server_lr = TRANSFER_OTHER_LR;
    let seed = sfl.seed;
    let mut run = SflRun::new(model, dataset, sfl)?;
    let results = match strategy {
        TransferStrategy::AwareFinetune => {
            let defense = AwareDefense::new(AwareTrainConfig {
                lambda,
                sim_tier: InversionTier::L0,
                update_freq: TRANSFER_SIM_UPDATE_FREQ,
                base_width: 8,
                seed,
            })?;
            run.run(&defense)?
        }
        _ => run.run(&crate::protocol::NoDefense)?,
    };
    Ok((run, results))
}

/// Activation perturbation baselines (applied on a trained model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMethod {
    /// Additive Laplace(0, b) noise.
    Laplacian,
    /// Multiplicative Bernoulli mask: elements drop to 0 with probability p,
    /// no rescaling.
    Dropout,
    /// Keep the top k percent of elements per sample by magnitude.
    TopkPrune,
    /// FGSM step of size epsilon ascending a surrogate decoder's
    /// reconstruction error.
    AdvNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub method: PerturbMethod,
    pub value: f64,
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.method {
            PerturbMethod::Laplacian | PerturbMethod::AdvNoise => self.value >= 0.0,
            PerturbMethod::Dropout => (0.0..1.0).contains(&self.value),
            PerturbMethod::TopkPrune => self.value > 0.0 && self.value <= 100.0,
        };
        if ok && self.value.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "{:?} parameter {} out of range",
                self.method, self.value
            )))
        }
    }
}

/// Apply one perturbation to an activation batch. AdvNoise needs the ground
/// truth images and a surrogate decoder; the others only need the RNG.
pub fn perturb_activation(
    activation: &Tensor,
    cfg: &PerturbConfig,
    rng: &mut ChaCha8Rng,
    surrogate: Option<&mut Network>,
    images: Option<&Tensor>,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut out = activation.clone();
    match cfg.method {
        PerturbMethod::Laplacian => {
            let b = cfg.value;
            if b == 0.0 {
                return Ok(out);
            }
            for v in out.data_mut() {
                *v += laplace(rng, b);
            }
        }
        PerturbMethod::Dropout => {
            let p = cfg.value;
            if p == 0.0 {
                return Ok(out);
            }
            for v in out.data_mut() {
                if rng.gen_range(0.0..1.0) < p {
                    *v = 0.0;
                }
            }
        }
        PerturbMethod::TopkPrune => {
            let k = cfg.value;
            if k >= 100.0 {
                return Ok(out);
            }
            let n = activation.shape()[0];
            let per = activation.len() / n;
            let keep = ((per as f64) * k / 100.0).round() as usize;
            let data = out.data_mut();
            for s in 0..n {
                let slice = &mut data[s * per..(s + 1) * per];
                let mut order: Vec<usize> = (0..per).collect();
                // Magnitude descending, index ascending on ties.
                order.sort_by(|&a, &b| {
                    slice[b]
                        .abs()
                        .partial_cmp(&slice[a].abs())
                        .unwrap()
                        .then(a.cmp(&b))
                });
                for &i in &order[keep.min(per)..] {
                    slice[i] = 0.0;
                }
            }
        }
        PerturbMethod::AdvNoise => {
            let eps = cfg.value;
            if eps == 0.0 {
                return Ok(out);
            }
            let surrogate = surrogate.ok_or_else(|| {
                Error::InvalidParam("AdvNoise requires a surrogate inversion model".into())
            })?;
            let images = images.ok_or_else(|| {
                Error::InvalidParam("AdvNoise requires the ground-truth batch".into())
            })?;
            let delta = fgsm_delta(surrogate, activation, images, eps)?;
            out.add_scaled(&delta, 1.0)?;
        }
    }
    Ok(out)
}

/// FGSM perturbation `eps * sign(d MSE(G(act), x) / d act)`; every element is
/// exactly +-eps or 0.
pub fn fgsm_delta(
    surrogate: &mut Network,
    activation: &Tensor,
    images: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    surrogate.zero_grad();
    let recon = surrogate.forward(activation)?;
    let (_, d_recon) = crate::loss::mse_loss(&recon, images)?;
    let act_grad = surrogate.backward(&d_recon)?;
    let delta = act_grad.data().iter().map(|&g| eps * sign(g)).collect();
    Ok(Tensor::from_vec(activation.shape().to_vec(), delta))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Stateful perturbation channel used when evaluating the attack against a
/// perturbation defense: both the attacker's decoder training and the final
/// reconstruction see activations through this filter.
pub struct PerturbFilter {
    pub cfg: PerturbConfig,
    pub rng: ChaCha8Rng,
    pub surrogate: Option<Network>,
}

impl PerturbFilter {
    pub fn new(cfg: PerturbConfig, seed: u64, surrogate: Option<Network>) -> Result<Self> {
        cfg.validate()?;
        if cfg.method == PerturbMethod::AdvNoise && surrogate.is_none() {
            return Err(Error::InvalidParam(
                "AdvNoise requires a surrogate inversion model".into(),
            ));
        }
        Ok(PerturbFilter {
            cfg,
            rng: substream(seed, "perturb-filter", 0),
            surrogate,
        })
    }
}

impl ActivationFilter for PerturbFilter {
    fn apply(&mut self, activation: Tensor, images: &Tensor) -> Result<Tensor> {
        perturb_activation(
            &activation,
            &self.cfg,
            &mut self.rng,
            self.surrogate.as_mut(),
            Some(images),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistCorrConfig {
    pub alpha: f64,
}

impl DistCorrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha >= 0.0 && self.alpha.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("alpha {} must be >= 0", self.alpha)))
        }
    }
}

/// Empirical distance correlation between two sample batches (biased
/// V-statistic, double-centered pairwise Euclidean distances). Batches are
/// flattened per sample.
pub fn distance_correlation(x: &Tensor, a: &Tensor) -> Result<f64> {
    Ok(dcor_impl(x, a, false)?.0)
}

/// Distance correlation plus its gradient with respect to `a`.
pub fn distance_correlation_with_grad(x: &Tensor, a: &Tensor) -> Result<(f64, Tensor)> {
    let (v, g) = dcor_impl(x, a, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn dcor_impl(x: &Tensor, a: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let n = x.shape()[0];
    if a.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            context: "distance_correlation batch".into(),
            expected: vec![n],
            got: vec![a.shape()[0]],
        });
    }
    if n < 2 {
        return Err(Error::InvalidParam(
            "distance correlation needs a batch of at least 2".into(),
        ));
    }
    let dx = x.len() / n;
    let da = a.len() / n;
    let xd = x.data();
    let ad = a.data();

    let dist = |data: &[f64], dim: usize, j: usize, k: usize| -> f64 {
        let (rj, rk) = (&data[j * dim..(j + 1) * dim], &data[k * dim..(k + 1) * dim]);
        rj.iter()
            .zip(rk.iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt()
    };
    let mut mx = vec![0.0; n * n];
    let mut ma = vec![0.0; n * n];
    for j in 0..n {
        for k in (j + 1)..n {
            let d1 = dist(xd, dx, j, k);
            let d2 = dist(ad, da, j, k);
            mx[j * n + k] = d1;
            mx[k * n + j] = d1;
            ma[j * n + k] = d2;
            ma[k * n + j] = d2;
        }
    }
    let center = |m: &[f64]| -> Vec<f64> {
        let mut row = vec![0.0; n];
        let mut col = vec![0.0; n];
        let mut grand = 0.0;
        for j in 0..n {
            for k in 0..n {
                row[j] += m[j * n + k];
                col[k] += m[j * n + k];
                grand += m[j * n + k];
            }
        }
        let nf = n as f64;
        let mut out = vec![0.0; n * n];
        for j in 0..n {
            for k in 0..n {
                out[j * n + k] = m[j * n + k] - row[j] / nf - col[k] / nf + grand / (nf * nf);
            }
        }
        out
    };
    let cx = center(&mx);
    let ca = center(&ma);
    let n2 = (n * n) as f64;
    let mut v_xy = 0.0;
    let mut v_xx = 0.0;
    let mut v_yy = 0.0;
    for i in 0..n * n {
        v_xy += cx[i] * ca[i];
        v_xx += cx[i] * cx[i];
        v_yy += ca[i] * ca[i];
    }
    v_xy /= n2;
    v_xx /= n2;
    v_yy /= n2;

    if v_xx <= 0.0 || v_yy <= 0.0 {
        let g = want_grad.then(|| Tensor::zeros(a.shape().to_vec()));
        return Ok((0.0, g));
    }
    let s = (v_xx * v_yy).sqrt();
    let r2 = (v_xy / s).max(0.0);
    let r = r2.sqrt();

    if !want_grad {
        return Ok((r, None));
    }
    let mut grad = vec![0.0; a.len()];
    if r > 0.0 {
        // dR/db_jk via dR2 = (cx - r2 * (v_xx/v_xy)^{-1}... expanded below),
        // then chain through b_jk = |A_j - A_k|.
        let mut dr_db = vec![0.0; n * n];
        for i in 0..n * n {
            let dr2 = cx[i] / (n2 * s) - v_xy * v_xx * ca[i] / (n2 * s * s * s);
            dr_db[i] = dr2 / (2.0 * r);
        }
        for j in 0..n {
            for k in 0..n {
                if j == k {
                    continue;
                }
                let b = ma[j * n + k];
                if b == 0.0 {
                    continue;
                }
                let coeff = 2.0 * dr_db[j * n + k] / b;
                let (rj, rk) = (j * da, k * da);
                for d in 0..da {
                    grad[rj + d] += coeff * (ad[rj + d] - ad[rk + d]);
                }
            }
        }
    }
    Ok((r, Some(Tensor::from_vec(a.shape().to_vec(), grad))))
}

/// Training-time regularizer hook: adds alpha * d dCor(x, A)/dA to the
/// activation gradient so the client also minimizes the dependence between
/// its inputs and what it sends.
pub struct DistCorrDefense {
    pub cfg: DistCorrConfig,
}

impl DistCorrDefense {
    pub fn new(cfg: DistCorrConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DistCorrDefense { cfg })
    }
}

impl DefenseHook for DistCorrDefense {
    fn activation_grad_extra(
        &self,
        _client: &mut ClientState,
        activation: &Tensor,
        batch: &Batch,
    ) -> Result<Option<Tensor>> {
        if self.cfg.alpha == 0.0 {
            return Ok(None);
        }
        let (_, mut grad) = distance_correlation_with_grad(&batch.images, activation)?;
        grad.data_mut().iter_mut().for_each(|v| *v *= self.cfg.alpha);
        Ok(Some(grad))
    }
}
