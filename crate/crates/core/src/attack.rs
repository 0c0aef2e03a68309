//! The honest-but-curious server's training-based model-inversion attack.
//!
//! For a frozen snapshot of the client-side model, the attacker trains a
//! decoder per tier on the auxiliary (validation) set to minimize pixel MSE,
//! then runs the decoder over the activations it recorded during training (or
//! over fresh activations for inference-time evaluation) and scores the
//! reconstructions against the private images. Resistance is the best tier's
//! MSE; 0.02 is the target.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Network;
use crate::loss::mse_loss;
use crate::metrics::{psnr_from_mse, ssim};
use crate::optim::Adam;
use crate::protocol::{epoch_batch_plan, par_try_for_each, ActivationRecord, RunHistory, SflData};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::zoo::{build_inversion_model, InversionTier};

/// MSE at or above this counts as resistant.
pub const RESISTANCE_TARGET_MSE: f64 = 0.02;

/// Adam learning rate for inversion-model training.
pub const INVERSION_LR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub tiers: Vec<InversionTier>,
    /// SFL epochs at which to attack (1-based).
    pub attack_epochs: Vec<usize>,
    pub inversion_train_epochs: usize,
    pub base_width: usize,
    pub batch_size: usize,
    /// Cap on scored activation batches per evaluation; None scores the
    /// whole log.
    pub max_eval_batches: Option<usize>,
    pub seed: u64,
    pub threads: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            tiers: InversionTier::ALL.to_vec(),
            attack_epochs: Vec::new(),
            inversion_train_epochs: 50,
            base_width: 8,
            batch_size: 16,
            max_eval_batches: None,
            seed: 0,
            threads: 1,
        }
    }
}

/// Defense-side transformation of the activation channel (perturbation
/// baselines); the attacker sees activations only through this filter.
pub trait ActivationFilter {
    fn apply(&mut self, activation: Tensor, images: &Tensor) -> Result<Tensor>;
}

/// A decoder trained against one epoch snapshot.
#[derive(Debug, Clone)]
pub struct TrainedInversion {
    pub net: Network,
    pub tier: InversionTier,
    /// Epoch of the snapshot this decoder was trained against; None for
    /// inference-time (post-training) attacks.
    pub epoch: Option<usize>,
    /// Final auxiliary MSE reached during training.
    pub aux_mse: f64,
}

impl TrainedInversion {
    /// Reconstruct private data from a logged activation; guards against
    /// applying a stale decoder to another epoch's log.
    pub fn reconstruct(&self, record: &ActivationRecord) -> Result<Tensor> {
        if let Some(e) = self.epoch {
            if e != record.epoch {
                return Err(Error::AttackEpochMismatch {
                    model_epoch: self.epoch,
                    activation_epoch: record.epoch,
                });
            }
        }
        self.net.predict(&record.activation)
    }

    /// Reconstruct from a fresh activation tensor.
    pub fn reconstruct_raw(&self, activation: &Tensor) -> Result<Tensor> {
        self.net.predict(activation)
    }
}

/// Decoder fit `G = argmin MSE(G(C(x_aux)), x_aux)` with Adam at lr 1e-3,
/// early-stopped once the aux MSE plateaus (< 1e-5 improvement over 5
/// epochs). `snapshot` is taken by shared reference, so the client model
/// provably keeps its parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_inversion_model(
    snapshot: &Network,
    tier: InversionTier,
    data: &SflData,
    image_shape: &[usize; 3],
    cfg: &AttackConfig,
    epoch_tag: Option<usize>,
    mut filter: Option<&mut (dyn ActivationFilter + '_)>,
    stream_tag: u64,
) -> Result<TrainedInversion> {
    let act_shape_v =
        snapshot.output_shape(&[1, image_shape[0], image_shape[1], image_shape[2]])?;
    let act_shape = [act_shape_v[1], act_shape_v[2], act_shape_v[3]];
    let mut g = build_inversion_model(
        tier,
        &act_shape,
        image_shape,
        cfg.base_width,
        cfg.seed ^ stream_tag,
    )?;
    let mut opt = Adam::new(INVERSION_LR)?;
    let mut rng = substream(cfg.seed, "inversion-aux-order", stream_tag);

    let mut best = f64::INFINITY;
    let mut stall = 0usize;
    let mut last_epoch_mse = f64::INFINITY;
    for _ in 0..cfg.inversion_train_epochs {
        let plan = epoch_batch_plan(&mut rng, &data.val_indices, cfg.batch_size);
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for indices in &plan {
            let batch = data.server_aux_batch(indices)?;
            let mut act = snapshot.predict(&batch.images)?;
            if let Some(f) = filter.as_deref_mut() {
                act = f.apply(act, &batch.images)?;
            }
            g.zero_grad();
            let recon = g.forward(&act)?;
            let (loss, grad) = mse_loss(&recon, &batch.images)?;
            g.backward(&grad)?;
            opt.step(&mut g)?;
            loss_sum += loss * indices.len() as f64;
            n += indices.len();
        }
        last_epoch_mse = loss_sum / n as f64;
        if best - last_epoch_mse < 1e-5 {
            stall += 1;
            if stall >= 5 {
                break;
            }
        } else {
            stall = 0;
        }
        best = best.min(last_epoch_mse);
    }
    Ok(TrainedInversion {
        net: g,
        tier,
        epoch: epoch_tag,
        aux_mse: last_epoch_mse,
    })
}

/// One scored tier at one evaluation point.
#[derive(Debug, Clone)]
pub struct AttackRow {
    pub epoch: usize,
    pub tier: InversionTier,
    pub mse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

/// Per-epoch resistance record: one row per tier plus the best-tier summary.
#[derive(Debug, Clone)]
pub struct ResistanceReport {
    pub epoch: usize,
    pub rows: Vec<AttackRow>,
    pub mse_l0: Option<f64>,
    pub mse_best: f64,
    pub verdict: bool,
}

impl ResistanceReport {
    pub fn from_rows(epoch: usize, rows: Vec<AttackRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyTiers);
        }
        let mse_best = rows.iter().map(|r| r.mse).fold(f64::INFINITY, f64::min);
        let mse_l0 = rows
            .iter()
            .find(|r| r.tier == InversionTier::L0)
            .map(|r| r.mse);
        Ok(ResistanceReport {
            epoch,
            rows,
            mse_l0,
            mse_best,
            verdict: mse_best >= RESISTANCE_TARGET_MSE,
        })
    }
}

/// What the decoder reconstructs from during scoring.
enum EvalSource<'a> {
    /// Activations recorded by the HBC server during epoch t.
    Logged(Vec<&'a ActivationRecord>),
    /// Fresh activations of the given dataset indices through the snapshot.
    Fresh(&'a [usize]),
}

fn score_pairs(pairs: &[(Tensor, Tensor)]) -> Result<(f64, f64)> {
    let mut sq_sum = 0.0;
    let mut elems = 0usize;
    let mut ssim_sum = 0.0;
    let mut images = 0usize;
    for (recon, truth) in pairs {
        let b = truth.shape()[0];
        sq_sum += crate::metrics::mse(recon, truth)? * truth.len() as f64;
        elems += truth.len();
        ssim_sum += ssim(recon, truth)? * b as f64;
        images += b;
    }
    Ok((sq_sum / elems as f64, ssim_sum / images as f64))
}

fn evaluate_tiers(
    snapshot: &Network,
    data: &SflData,
    image_shape: &[usize; 3],
    cfg: &AttackConfig,
    epoch_tag: Option<usize>,
    source: &EvalSource,
    mut filter: Option<&mut (dyn ActivationFilter + '_)>,
) -> Result<Vec<AttackRow>> {
    if cfg.tiers.is_empty() {
        return Err(Error::EmptyTiers);
    }
    let report_epoch = epoch_tag.unwrap_or(0);

    // Materialize (activation, truth) pairs once; every tier scores the same
    // pairs.
    let mut eval_pairs: Vec<(Tensor, Tensor)> = Vec::new();
    match source {
        EvalSource::Logged(records) => {
            let cap = cfg.max_eval_batches.unwrap_or(usize::MAX);
            for rec in records.iter().take(cap) {
                let truth = data.eval_batch(&rec.indices).images;
                eval_pairs.push((rec.activation.clone(), truth));
            }
        }
        EvalSource::Fresh(indices) => {
            let cap = cfg
                .max_eval_batches
                .map(|b| b * cfg.batch_size)
                .unwrap_or(usize::MAX);
            let capped: Vec<usize> = indices.iter().take(cap).copied().collect();
            for chunk in capped.chunks(cfg.batch_size) {
                let truth = data.eval_batch(chunk).images;
                let mut act = snapshot.predict(&truth)?;
                if let Some(f) = filter.as_deref_mut() {
                    act = f.apply(act, &truth)?;
                }
                eval_pairs.push((act, truth));
            }
        }
    }
    if eval_pairs.is_empty() {
        return Err(Error::InvalidParam("nothing to reconstruct".into()));
    }

    struct TierWork<'a> {
        tier: InversionTier,
        ordinal: u64,
        row: Option<AttackRow>,
        err: Option<Error>,
        cfg: &'a AttackConfig,
    }
    let mut works: Vec<TierWork> = cfg
        .tiers
        .iter()
        .enumerate()
        .map(|(i, &tier)| TierWork {
            tier,
            ordinal: i as u64,
            row: None,
            err: None,
            cfg,
        })
        .collect();

    let eval_pairs = &eval_pairs;

    // With a stateful filter the tiers must share it, so run serially; the
    // clean path can fan tiers out across threads.
    if filter.is_some() || cfg.threads <= 1 {
        for w in works.iter_mut() {
            w.row = Some(run_tier(
                snapshot,
                data,
                image_shape,
                w.cfg,
                epoch_tag,
                report_epoch,
                w.tier,
                eval_pairs,
                filter.as_deref_mut(),
            )?);
            let _ = w.ordinal;
        }
    } else {
        par_try_for_each(&mut works, cfg.threads, |w| {
            match run_tier(
                snapshot,
                data,
                image_shape,
                w.cfg,
                epoch_tag,
                report_epoch,
                w.tier,
                eval_pairs,
                None,
            ) {
                Ok(row) => w.row = Some(row),
                Err(e) => w.err = Some(e),
            }
            let _ = w.ordinal;
            Ok(())
        })?;
        if let Some(w) = works.iter_mut().find(|w| w.err.is_some()) {
            return Err(w.err.take().unwrap());
        }
    }
    Ok(works
        .into_iter()
        .map(|w| w.row.expect("tier scored"))
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn run_tier(
    snapshot: &Network,
    data: &SflData,
    image_shape: &[usize; 3],
    cfg: &AttackConfig,
    epoch_tag: Option<usize>,
    report_epoch: usize,
    tier: InversionTier,
    eval_pairs: &[(Tensor, Tensor)],
    filter: Option<&mut (dyn ActivationFilter + '_)>,
) -> Result<AttackRow> {
    let stream = ((report_epoch as u64) << 8) | (tier as u64);
    let g = train_inversion_model(
        snapshot,
        tier,
        data,
        image_shape,
        cfg,
        epoch_tag,
        filter,
        stream,
    )?;
    let scored: Vec<(Tensor, Tensor)> = eval_pairs
        .iter()
        .map(|(act, truth)| Ok((g.reconstruct_raw(act)?, truth.clone())))
        .collect::<Result<_>>()?;
    let (mse, ssim) = score_pairs(&scored)?;
    Ok(AttackRow {
        epoch: report_epoch,
        tier,
        mse,
        ssim,
        psnr: psnr_from_mse(mse),
    })
}

/// Training-time resistance at epoch t, scored on the HBC server's logged
/// activations against the epoch-t snapshot of C*.
pub fn evaluate_resistance_logged(
    history: &RunHistory,
    epoch: usize,
    data: &SflData,
    image_shape: &[usize; 3],
    cfg: &AttackConfig,
) -> Result<ResistanceReport> {
    let snapshot = history.snapshot(epoch)?;
    let records = history.activations_at(epoch);
    if records.is_empty() {
        return Err(Error::MissingSnapshot {
            requested: epoch,
            available: history.snapshots.keys().copied().collect(),
        });
    }
    let rows = evaluate_tiers(
        snapshot,
        data,
        image_shape,
        cfg,
        Some(epoch),
        &EvalSource::Logged(records),
        None,
    )?;
    ResistanceReport::from_rows(epoch, rows)
}

/// Inference-time resistance of a converged client model on the given private
/// indices, optionally through a perturbation filter.
pub fn evaluate_resistance_inference(
    client_model: &Network,
    data: &SflData,
    private_indices: &[usize],
    image_shape: &[usize; 3],
    cfg: &AttackConfig,
    filter: Option<&mut (dyn ActivationFilter + '_)>,
) -> Result<ResistanceReport> {
    let rows = evaluate_tiers(
        client_model,
        data,
        image_shape,
        cfg,
        None,
        &EvalSource::Fresh(private_indices),
        filter,
    )?;
    ResistanceReport::from_rows(0, rows)
}

/// Run the configured schedule over a finished run's history: one
/// [`ResistanceReport`] per requested epoch.
pub fn attack_schedule(
    history: &RunHistory,
    data: &SflData,
    image_shape: &[usize; 3],
    cfg: &AttackConfig,
) -> Result<Vec<ResistanceReport>> {
    if cfg.attack_epochs.is_empty() {
        return Err(Error::EmptySchedule);
    }
    let mut epochs = cfg.attack_epochs.clone();
    epochs.sort_unstable();
    epochs.dedup();
    epochs
        .into_iter()
        .map(|t| evaluate_resistance_logged(history, t, data, image_shape, cfg))
        .collect()
}

/// Mean per-pixel variance of a set of images; the floor a constant predictor
/// can reach, used by the attack sanity checks.
pub fn pixel_variance(images: &Tensor) -> f64 {
    let n = images.shape()[0];
    let pixels = images.len() / n;
    let data = images.data();
    let mut total = 0.0;
    for p in 0..pixels {
        let mut mean = 0.0;
        for i in 0..n {
            mean += data[i * pixels + p];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let d = data[i * pixels + p] - mean;
            var += d * d;
        }
        total += var / n as f64;
    }
    total / pixels as f64
}

/// Per-pixel mean image over the given indices.
pub fn mean_image(dataset: &Dataset, indices: &[usize]) -> Tensor {
    let batch = dataset.batch_images(indices);
    let n = batch.shape()[0];
    let pixels = batch.len() / n;
    let mut mean = vec![0.0; pixels];
    for i in 0..n {
        for p in 0..pixels {
            mean[p] += batch.data()[i * pixels + p];
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut shape = batch.shape().to_vec();
    shape[0] = 1;
    Tensor::from_vec(shape, mean)
}
