//! The SFL-V2 training loop.
//!
//! Per epoch: client replicas are averaged into the central copy C* and
//! broadcast back, then every participating client walks its private shard in
//! seeded-shuffled batches. The client computes the activation at the cut,
//! the shared server model finishes the forward pass, computes cross-entropy
//! and returns the activation gradient; both sides step their own SGD per
//! batch. The server processes client batches in round-robin client order, so
//! results are identical whether client-side work runs on one thread or many.
//!
//! The honest-but-curious server records received activations in an
//! append-only log and snapshots C* at the start of selected epochs; the
//! attack module feeds on both.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Network;
use crate::loss::softmax_cross_entropy;
use crate::metrics::accuracy;
use crate::optim::{decayed_lr, Adam, Sgd};
use crate::rng::{shuffled_indices, substream};
use crate::tensor::Tensor;
use crate::zoo::SplitModel;

/// One batch drawn from a client's shard: global dataset indices plus the
/// materialized images/labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Who touched raw images; the audit trail backs the privacy-boundary tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Party {
    Client(usize),
    Server,
    Evaluator,
}

#[derive(Debug, Default)]
pub struct AccessAudit {
    entries: Mutex<Vec<(Party, Vec<usize>)>>,
}

impl AccessAudit {
    fn record(&self, party: Party, indices: &[usize]) {
        self.entries
            .lock()
            .expect("audit lock")
            .push((party, indices.to_vec()));
    }

    pub fn entries(&self) -> Vec<(Party, Vec<usize>)> {
        self.entries.lock().expect("audit lock").clone()
    }
}

/// Dataset plus the train/validation split and the raw-image access audit.
/// The validation side is simultaneously the server's auxiliary set.
#[derive(Debug)]
pub struct SflData {
    pub dataset: Dataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub audit: AccessAudit,
}

impl SflData {
    pub fn new(dataset: Dataset, val_fraction: f64, seed: u64) -> Self {
        let (train_indices, val_indices) =
            crate::data::train_val_split(dataset.len(), val_fraction, seed);
        SflData {
            dataset,
            train_indices,
            val_indices,
            audit: AccessAudit::default(),
        }
    }

    /// Raw-image fetch on behalf of a client; enforces the shard boundary.
    pub fn client_batch(&self, client: &ClientState, indices: &[usize]) -> Result<Batch> {
        if !indices.iter().all(|i| client.shard_set.contains(i)) {
            return Err(Error::ShardViolation { client: client.id });
        }
        self.audit.record(Party::Client(client.id), indices);
        Ok(self.batch(indices))
    }

    /// Raw-image fetch on behalf of the server; restricted to the validation
    /// (auxiliary) set.
    pub fn server_aux_batch(&self, indices: &[usize]) -> Result<Batch> {
        let val: HashSet<usize> = self.val_indices.iter().copied().collect();
        if !indices.iter().all(|i| val.contains(i)) {
            return Err(Error::InvalidParam(
                "server may only read validation images".into(),
            ));
        }
        self.audit.record(Party::Server, indices);
        Ok(self.batch(indices))
    }

    /// Experimenter-side fetch used only to score reconstructions.
    pub fn eval_batch(&self, indices: &[usize]) -> Batch {
        self.audit.record(Party::Evaluator, indices);
        self.batch(indices)
    }

    fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            indices: indices.to_vec(),
            images: self.dataset.batch_images(indices),
            labels: self.dataset.batch_labels(indices),
        }
    }
}

/// The client's local inversion model D^i used by attacker-aware training.
#[derive(Debug, Clone)]
pub struct SimulatedAttacker {
    pub net: Network,
    pub opt: Adam,
    pub steps: u64,
    pub phase_a_runs: u64,
}

#[derive(Debug)]
pub struct ClientState {
    pub id: usize,
    /// Local replica C^i of the client part.
    pub model: Network,
    pub shard: Vec<usize>,
    shard_set: HashSet<usize>,
    pub opt: Sgd,
    pub rng: ChaCha8Rng,
    pub sim: Option<SimulatedAttacker>,
}

impl ClientState {
    pub fn set_shard(&mut self, shard: Vec<usize>) {
        self.shard_set = shard.iter().copied().collect();
        self.shard = shard;
    }

    /// Forward the client's own batch to the cut layer, caching for backward.
    pub fn forward_batch(&mut self, batch: &Batch) -> Result<Tensor> {
        self.model.forward(&batch.images)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochResult {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub wall_steps: usize,
}

/// Activation A^i_t as received by the server.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    pub epoch: usize,
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub activation: Tensor,
}

/// Which epochs to snapshot and log for later attack evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum LogPolicy {
    All,
    Epochs(BTreeSet<usize>),
    None,
}

impl LogPolicy {
    fn covers(&self, epoch: usize) -> bool {
        match self {
            LogPolicy::All => true,
            LogPolicy::Epochs(set) => set.contains(&epoch),
            LogPolicy::None => false,
        }
    }
}

/// Snapshots of C* plus the append-only activation log.
#[derive(Debug, Default)]
pub struct RunHistory {
    pub snapshots: BTreeMap<usize, Network>,
    pub activations: Vec<ActivationRecord>,
}

impl RunHistory {
    pub fn snapshot(&self, epoch: usize) -> Result<&Network> {
        self.snapshots.get(&epoch).ok_or_else(|| Error::MissingSnapshot {
            requested: epoch,
            available: self.snapshots.keys().copied().collect(),
        })
    }

    pub fn activations_at(&self, epoch: usize) -> Vec<&ActivationRecord> {
        self.activations
            .iter()
            .filter(|r| r.epoch == epoch)
            .collect()
    }
}

#[derive(Debug)]
pub struct ServerState {
    /// Server part S, shared across clients.
    pub model: Network,
    pub opt: Sgd,
    /// Synchronized central copy C*.
    pub central: Network,
    pub epoch: usize,
    pub history: RunHistory,
}

#[derive(Debug, Clone)]
pub struct SflParams {
    pub num_clients: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub momentum: f64,
    pub sampling_rate: f64,
    pub lr_decay: bool,
    pub seed: u64,
    pub threads: usize,
    pub log: LogPolicy,
}

impl Default for SflParams {
    fn default() -> Self {
        SflParams {
            num_clients: 2,
            total_epochs: 20,
            batch_size: 16,
            client_lr: 0.05,
            server_lr: 0.05,
            momentum: 0.9,
            sampling_rate: 1.0,
            lr_decay: true,
            seed: 0,
            threads: 1,
            log: LogPolicy::All,
        }
    }
}

/// Defense interposition points inside the per-batch step. Implementations
/// keep their per-client state inside `ClientState::sim` so client work can
/// run on separate threads.
pub trait DefenseHook: Sync {
    /// Runs after the client forward, before the task step; attacker-aware
    /// training uses this to fit the local inversion model (max phase).
    fn before_task_step(&self, _client: &mut ClientState, _activation: &Tensor, _batch: &Batch) -> Result<()> {
        Ok(())
    }

    /// Extra gradient added to the server's activation gradient before the
    /// client backward pass (already scaled by the regularization strength).
    fn activation_grad_extra(
        &self,
        _client: &mut ClientState,
        _activation: &Tensor,
        _batch: &Batch,
    ) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// Plain SFL.
pub struct NoDefense;

impl DefenseHook for NoDefense {}

/// One SFL training run: clients, server and data.
pub struct SflRun {
    pub data: SflData,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub params: SflParams,
}

impl SflRun {
    /// Partition the train split across `num_clients` and replicate the
    /// client part everywhere.
    pub fn new(model: SplitModel, dataset: Dataset, params: SflParams) -> Result<Self> {
        let data = SflData::new(dataset, 0.2, params.seed);
        let partition =
            crate::data::partition_clients(&data.train_indices, params.num_clients, params.seed)?;
        let clients = partition
            .shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| {
                let mut c = ClientState {
                    id,
                    model: model.client.clone(),
                    shard: Vec::new(),
                    shard_set: HashSet::new(),
                    opt: Sgd::new(params.client_lr, params.momentum).expect("client lr"),
                    rng: substream(params.seed, "client", id as u64),
                    sim: None,
                };
                c.set_shard(shard);
                c
            })
            .collect();
        let server = ServerState {
            model: model.server.clone(),
            opt: Sgd::new(params.server_lr, params.momentum)?,
            central: model.client.clone(),
            epoch: 0,
            history: RunHistory::default(),
        };
        Ok(SflRun {
            data,
            clients,
            server,
            params,
        })
    }

    /// Run all epochs under the given defense hook.
    pub fn run(&mut self, hook: &dyn DefenseHook) -> Result<Vec<EpochResult>> {
        (0..self.params.total_epochs)
            .map(|_| self.train_epoch(hook))
            .collect()
    }

    /// One full epoch: average + broadcast, then round-robin batch steps.
    pub fn train_epoch(&mut self, hook: &dyn DefenseHook) -> Result<EpochResult> {
        self.server.epoch += 1;
        let t = self.server.epoch;
        let total = self.params.total_epochs;
        if self.params.lr_decay {
            self.server.opt.lr = decayed_lr(self.params.server_lr, t, total);
        }
        let client_lr = if self.params.lr_decay {
            decayed_lr(self.params.client_lr, t, total)
        } else {
            self.params.client_lr
        };

        let mut sampling_rng = substream(self.params.seed, "sampling", t as u64);
        let participating = sample_clients(self.clients.len(), self.params.sampling_rate, &mut sampling_rng);

        // Average participating replicas into C* and broadcast back.
        {
            let replicas: Vec<(usize, &Network)> = self
                .clients
                .iter()
                .filter(|c| participating.contains(&c.id))
                .map(|c| (c.id, &c.model))
                .collect();
            let central = federated_average(&replicas)?;
            self.server.central.copy_params_from(&central)?;
        }
        for c in self.clients.iter_mut().filter(|c| participating.contains(&c.id)) {
            c.model.copy_params_from(&self.server.central)?;
        }
        if self.params.log.covers(t) {
            self.server
                .history
                .snapshots
                .insert(t, self.server.central.clone());
        }

        // Per-participant batch plans for the epoch.
        struct Work<'a> {
            client: &'a mut ClientState,
            plan: Vec<Vec<usize>>,
            act: Option<Tensor>,
            batch: Option<Batch>,
            act_grad: Option<Tensor>,
        }
        let mut works: Vec<Work> = self
            .clients
            .iter_mut()
            .filter(|c| participating.contains(&c.id))
            .map(|client| {
                client.opt.lr = client_lr;
                let plan = epoch_batch_plan(&mut client.rng, &client.shard, self.params.batch_size);
                Work {
                    client,
                    plan,
                    act: None,
                    batch: None,
                    act_grad: None,
                }
            })
            .collect();

        let rounds = works.iter().map(|w| w.plan.len()).max().unwrap_or(0);
        let mut losses: Vec<f64> = Vec::new();
        let mut wall_steps = 0usize;
        let data = &self.data;
        let threads = self.params.threads.max(1);

        for round in 0..rounds {
            // Client-side forward (parallel-safe: per-client state only).
            par_try_for_each(&mut works, threads, |w| {
                let Some(indices) = w.plan.get(round) else {
                    w.act = None;
                    w.batch = None;
                    return Ok(());
                };
                let batch = data.client_batch(w.client, indices)?;
                w.client.model.zero_grad();
                let act = w.client.forward_batch(&batch)?;
                hook.before_task_step(w.client, &act, &batch)?;
                w.act = Some(act);
                w.batch = Some(batch);
                Ok(())
            })?;

            // Server side, strictly in ascending client order.
            for w in works.iter_mut() {
                let (Some(act), Some(batch)) = (&w.act, &w.batch) else {
                    continue;
                };
                if self.params.log.covers(t) {
                    self.server.history.activations.push(ActivationRecord {
                        epoch: t,
                        client_id: w.client.id,
                        indices: batch.indices.clone(),
                        activation: act.clone(),
                    });
                }
                self.server.model.zero_grad();
                let logits = self.server.model.forward(act)?;
                let (loss, dlogits) =
                    softmax_cross_entropy(&logits, &batch.labels).map_err(|_| Error::NanLoss {
                        epoch: t,
                        client: w.client.id,
                        step: round,
                        phase: "server cross-entropy".into(),
                    })?;
                if !loss.is_finite() {
                    return Err(Error::NanLoss {
                        epoch: t,
                        client: w.client.id,
                        step: round,
                        phase: "server cross-entropy".into(),
                    });
                }
                losses.push(loss);
                let act_grad = self.server.model.backward(&dlogits)?;
                self.server.opt.step(&mut self.server.model)?;
                w.act_grad = Some(act_grad);
                wall_steps += 1;
            }

            // Client-side backward and step (parallel-safe).
            par_try_for_each(&mut works, threads, |w| {
                let (Some(act), Some(batch), Some(act_grad)) =
                    (w.act.take(), w.batch.take(), w.act_grad.take())
                else {
                    return Ok(());
                };
                let mut total_grad = act_grad;
                if let Some(extra) = hook.activation_grad_extra(w.client, &act, &batch)? {
                    total_grad.add_scaled(&extra, 1.0)?;
                }
                w.client.model.backward(&total_grad)?;
                w.client.opt.step(&mut w.client.model)?;
                Ok(())
            })?;
        }
        drop(works);

        let train_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };

        // Validate the model the server would synchronize right now.
        let replicas: Vec<(usize, &Network)> = self
            .clients
            .iter()
            .filter(|c| participating.contains(&c.id))
            .map(|c| (c.id, &c.model))
            .collect();
        let eval_client = federated_average(&replicas)?;
        let val_accuracy = evaluate_accuracy(
            &eval_client,
            &self.server.model,
            &self.data,
            &self.data.val_indices.clone(),
        )?;

        Ok(EpochResult {
            epoch: t,
            train_loss,
            val_accuracy,
            wall_steps,
        })
    }

    /// Synchronize once more and return (client part, server part) for
    /// inference-time use after the final epoch.
    pub fn final_model(&self) -> Result<(Network, Network)> {
        let replicas: Vec<(usize, &Network)> =
            self.clients.iter().map(|c| (c.id, &c.model)).collect();
        Ok((federated_average(&replicas)?, self.server.model.clone()))
    }
}

/// Element-wise mean of the participating replicas, computed as
/// `r0 + sum(ri - r0)/N` so that averaging identical replicas is exact and
/// re-averaging a broadcast mean is a fixed point.
pub fn federated_average(replicas: &[(usize, &Network)]) -> Result<Network> {
    if replicas.is_empty() {
        return Err(Error::InvalidParam("federated_average of zero replicas".into()));
    }
    let mut order: Vec<usize> = (0..replicas.len()).collect();
    order.sort_by_key(|&i| replicas[i].0);
    let base = replicas[order[0]].1;
    let mut result = base.clone();
    let n = replicas.len() as f64;
    let base_params: Vec<&Tensor> = base.params();
    let mut sums: Vec<Vec<f64>> = base_params.iter().map(|p| vec![0.0; p.len()]).collect();
    for &oi in &order[1..] {
        let params = replicas[oi].1.params();
        if params.len() != base_params.len() {
            return Err(Error::InvalidParam("replica structure mismatch".into()));
        }
        for (slot, (p, b)) in params.iter().zip(base_params.iter()).enumerate() {
            if p.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    context: "federated_average".into(),
                    expected: b.shape().to_vec(),
                    got: p.shape().to_vec(),
                });
            }
            for ((s, &pv), &bv) in sums[slot].iter_mut().zip(p.data()).zip(b.data()) {
                *s += pv - bv;
            }
        }
    }
    for ((out, _), sum) in result.params_mut().into_iter().zip(sums.iter()) {
        for (o, s) in out.data_mut().iter_mut().zip(sum.iter()) {
            *o += s / n;
        }
    }
    Ok(result)
}

/// ceil(rate * N) distinct clients, ids ascending.
pub fn sample_clients(num_clients: usize, rate: f64, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    debug_assert!(rate > 0.0 && rate <= 1.0);
    let k = ((rate * num_clients as f64).ceil() as usize).clamp(1, num_clients);
    if k == num_clients {
        return (0..num_clients).collect();
    }
    let mut pool: Vec<usize> = (0..num_clients).collect();
    for i in 0..k {
        let j = rng.gen_range(i..num_clients);
        pool.swap(i, j);
    }
    pool[..k].iter().copied().collect()
}

/// Seeded-shuffle the shard and chunk it into batches; the trailing partial
/// batch is kept so every sample is visited each epoch.
pub fn epoch_batch_plan(rng: &mut ChaCha8Rng, shard: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let order = shuffled_indices(rng, shard.len());
    order
        .chunks(batch_size.max(1))
        .map(|chunk| chunk.iter().map(|&i| shard[i]).collect())
        .collect()
}

/// Accuracy of client-then-server on the given indices, batched.
pub fn evaluate_accuracy(
    client: &Network,
    server: &Network,
    data: &SflData,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct_weighted = 0.0;
    for chunk in indices.chunks(64) {
        let batch = data.eval_batch(chunk);
        let logits = server.predict(&client.predict(&batch.images)?)?;
        let acc = accuracy(&logits, &batch.labels)?;
        correct_weighted += acc * chunk.len() as f64;
    }
    Ok(correct_weighted / indices.len() as f64)
}

/// Run `f` over every item, splitting across up to `threads` scoped threads.
/// Items are processed independently, so scheduling cannot change results.
pub fn par_try_for_each<T: Send, F>(items: &mut [T], threads: usize, f: F) -> Result<()>
where
    F: Fn(&mut T) -> Result<()> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        for it in items.iter_mut() {
            f(it)?;
        }
        return Ok(());
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for ch in items.chunks_mut(chunk) {
            handles.push(scope.spawn(|| -> Result<()> {
                for it in ch {
                    f(it)?;
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("protocol worker panicked")?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::layers::params_bits_equal;
    use crate::zoo::{build_split_classifier, DESK_ARCH};

    fn desk_model(seed: u64) -> SplitModel {
        build_split_classifier(DESK_ARCH, 2, &[1, 8, 8], 4, seed).unwrap()
    }

    fn desk_run(seed: u64, clients: usize, epochs: usize) -> SflRun {
        let spec = SynthSpec {
            num_samples: 64,
            ..SynthSpec::default()
        };
        let data = synth_dataset(&spec, seed).unwrap();
        let model = desk_model(seed);
        SflRun::new(
            model,
            data,
            SflParams {
                num_clients: clients,
                total_epochs: epochs,
                batch_size: 8,
                seed,
                ..SflParams::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn average_of_identical_replicas_is_exact() {
        for n in [1usize, 2, 3, 5] {
            let net = desk_model(3).client;
            let replicas: Vec<(usize, &Network)> = (0..n).map(|i| (i, &net)).collect();
            let avg = federated_average(&replicas).unwrap();
            assert!(params_bits_equal(&avg, &net), "n = {n}");
        }
    }

    #[test]
    fn average_arithmetic_mean() {
        let mut a = desk_model(3).client;
        let mut b = a.clone();
        for (p, _) in a.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for (p, _) in b.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 2.0);
        }
        let avg = federated_average(&[(0, &a), (1, &b)]).unwrap();
        for p in avg.params() {
            assert!(p.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn re_averaging_broadcast_mean_is_fixed_point() {
        // Three structurally equal but numerically different replicas.
        let nets: Vec<Network> = (0..3).map(|s| desk_model(s).client).collect();
        let replicas: Vec<(usize, &Network)> = nets.iter().enumerate().map(|(i, n)| (i, n)).collect();
        let mean = federated_average(&replicas).unwrap();
        let broadcast: Vec<(usize, &Network)> = (0..3).map(|i| (i, &mean)).collect();
        let mean2 = federated_average(&broadcast).unwrap();
        assert!(params_bits_equal(&mean, &mean2));
    }

    #[test]
    fn average_rejects_shape_mismatch() {
        let a = desk_model(3).client;
        let b = build_split_classifier(DESK_ARCH, 1, &[1, 8, 8], 4, 3).unwrap().client;
        assert!(federated_average(&[(0, &a), (1, &b)]).is_err());
    }

    #[test]
    fn sampling_cardinalities() {
        let mut rng = substream(0, "test-sampling", 0);
        assert_eq!(sample_clients(7, 1.0, &mut rng).len(), 7);
        let s = sample_clients(100, 0.1, &mut rng);
        assert_eq!(s.len(), 10);
        assert_eq!(sample_clients(3, 0.5, &mut rng).len(), 2);
    }

    #[test]
    fn zero_weight_client_emits_zero_activation() {
        let mut run = desk_run(1, 1, 1);
        for (p, _) in run.clients[0].model.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let indices: Vec<usize> = run.clients[0].shard[..4].to_vec();
        let batch = run.data.client_batch(&run.clients[0], &indices).unwrap();
        let act = run.clients[0].forward_batch(&batch).unwrap();
        assert!(act.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn client_forward_is_pure_given_params() {
        let mut run = desk_run(2, 1, 1);
        let indices: Vec<usize> = run.clients[0].shard[..4].to_vec();
        let batch = run.data.client_batch(&run.clients[0], &indices).unwrap();
        let a = run.clients[0].forward_batch(&batch).unwrap();
        let b = run.clients[0].forward_batch(&batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn foreign_shard_access_is_rejected() {
        let run = desk_run(3, 2, 1);
        let foreign = run.clients[1].shard[0];
        assert!(matches!(
            run.data.client_batch(&run.clients[0], &[foreign]),
            Err(Error::ShardViolation { client: 0 })
        ));
    }

    #[test]
    fn averaging_identical_replicas_in_protocol_is_identity() {
        // All replicas start from the same clone, so the epoch-1 average must
        // equal any single replica bit-for-bit.
        let mut run = desk_run(4, 3, 1);
        let init = run.clients[0].model.clone();
        run.train_epoch(&NoDefense).unwrap();
        assert!(params_bits_equal(
            run.server.history.snapshot(1).unwrap(),
            &init
        ));
    }

    #[test]
    fn loss_decreases_on_learnable_task() {
        let mut run = desk_run(5, 2, 10);
        let results = run.run(&NoDefense).unwrap();
        assert_eq!(results.len(), 10);
        assert!(
            results.last().unwrap().train_loss < results[0].train_loss,
            "loss did not decrease: {results:?}"
        );
        assert!(results.iter().all(|r| (0.0..=100.0).contains(&r.val_accuracy)));
    }

    #[test]
    fn two_epochs_same_seed_are_bit_identical() {
        let mk = || {
            let mut run = desk_run(6, 2, 3);
            run.run(&NoDefense).unwrap();
            run
        };
        let a = mk();
        let b = mk();
        for (ca, cb) in a.clients.iter().zip(b.clients.iter()) {
            assert!(params_bits_equal(&ca.model, &cb.model));
        }
        assert!(params_bits_equal(&a.server.model, &b.server.model));
    }

    #[test]
    fn multithreaded_schedule_matches_single_thread() {
        let mk = |threads: usize| {
            let spec = SynthSpec {
                num_samples: 64,
                ..SynthSpec::default()
            };
            let data = synth_dataset(&spec, 7).unwrap();
            let model = desk_model(7);
            let mut run = SflRun::new(
                model,
                data,
                SflParams {
                    num_clients: 4,
                    total_epochs: 3,
                    batch_size: 8,
                    seed: 7,
                    threads,
                    ..SflParams::default()
                },
            )
            .unwrap();
            let results = run.run(&NoDefense).unwrap();
            (run, results)
        };
        let (run1, res1) = mk(1);
        let (run4, res4) = mk(4);
        assert_eq!(res1, res4);
        for (a, b) in run1.clients.iter().zip(run4.clients.iter()) {
            assert!(params_bits_equal(&a.model, &b.model));
        }
        assert!(params_bits_equal(&run1.server.model, &run4.server.model));
    }

    #[test]
    fn sampling_excludes_stale_replicas_from_average() {
        let spec = SynthSpec {
            num_samples: 60,
            ..SynthSpec::default()
        };
        let data = synth_dataset(&spec, 8).unwrap();
        let model = desk_model(8);
        let mut run = SflRun::new(
            model,
            data,
            SflParams {
                num_clients: 6,
                total_epochs: 2,
                batch_size: 8,
                sampling_rate: 0.34, // 3 of 6 per round
                seed: 8,
                ..SflParams::default()
            },
        )
        .unwrap();
        let before: Vec<Network> = run.clients.iter().map(|c| c.model.clone()).collect();
        run.train_epoch(&NoDefense).unwrap();
        let mut sampling_rng = substream(8, "sampling", 1);
        let participated = sample_clients(6, 0.34, &mut sampling_rng);
        assert_eq!(participated.len(), 3);
        for c in &run.clients {
            let moved = !params_bits_equal(&c.model, &before[c.id]);
            assert_eq!(
                moved,
                participated.contains(&c.id),
                "client {} participation mismatch",
                c.id
            );
        }
    }

    #[test]
    fn privacy_audit_confines_raw_reads() {
        let mut run = desk_run(9, 2, 2);
        run.run(&NoDefense).unwrap();
        let shards: Vec<HashSet<usize>> = run
            .clients
            .iter()
            .map(|c| c.shard.iter().copied().collect())
            .collect();
        let val: HashSet<usize> = run.data.val_indices.iter().copied().collect();
        for (party, indices) in run.data.audit.entries() {
            match party {
                Party::Client(id) => {
                    assert!(indices.iter().all(|i| shards[id].contains(i)));
                }
                Party::Server => {
                    assert!(indices.iter().all(|i| val.contains(i)));
                }
                Party::Evaluator => {}
            }
        }
    }

    #[test]
    fn activation_log_is_scoped_by_policy() {
        let spec = SynthSpec {
            num_samples: 48,
            ..SynthSpec::default()
        };
        let data = synth_dataset(&spec, 10).unwrap();
        let model = desk_model(10);
        let mut run = SflRun::new(
            model,
            data,
            SflParams {
                num_clients: 2,
                total_epochs: 3,
                batch_size: 8,
                seed: 10,
                log: LogPolicy::Epochs([2].into_iter().collect()),
                ..SflParams::default()
            },
        )
        .unwrap();
        run.run(&NoDefense).unwrap();
        assert!(run.server.history.snapshots.contains_key(&2));
        assert_eq!(run.server.history.snapshots.len(), 1);
        assert!(run.server.history.activations.iter().all(|r| r.epoch == 2));
        assert!(!run.server.history.activations.is_empty());
        assert!(matches!(
            run.server.history.snapshot(3),
            Err(Error::MissingSnapshot { requested: 3, .. })
        ));
    }
}
