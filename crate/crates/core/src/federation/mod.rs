//! Round orchestration: client sampling, model decomposition at each client's
//! freezing boundary, local SGD on the active layers, and layer-wise
//! aggregation on the server.

mod aggregate;

pub use aggregate::{aggregate_layerwise, Upload};

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{self, ClientCost, CostLedger, MemoryMode, ModelProfile};
use crate::data::{DatasetShard, PartitionedDataset};
use crate::error::{Error, Result};
use crate::nn::{ArchitectureSpec, Layer, Model};
use crate::seed::{self, SimRng, Stream};
use crate::toa::{self, ToaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Ordered layer freezing with per-client boundaries.
    #[default]
    Fedolf,
    /// Every client trains the whole model.
    Fedavg,
    /// Each client freezes a fixed random set of layers instead of a prefix.
    RandomFreeze,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fedolf => "fedolf",
            Strategy::Fedavg => "fedavg",
            Strategy::RandomFreeze => "random_freeze",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub clients: usize,
    pub participants_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// One freezing level per capacity cluster.
    pub freeze_levels: Vec<usize>,
    pub strategy: Strategy,
    /// Frozen-stack sparsification for clients with at least two frozen layers.
    pub toa: Option<ToaConfig>,
    /// Quantize the frozen stack instead (communication baseline); same
    /// eligibility as sparsification.
    pub qsgd_bits: Option<u32>,
    pub seed: u64,
}

impl FedConfig {
    pub fn clusters(&self) -> usize {
        self.freeze_levels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(key, msg));
        if self.clients == 0 {
            return bad("federation.clients", "must be at least 1".into());
        }
        if self.participants_per_round == 0 || self.participants_per_round > self.clients {
            return bad(
                "federation.participants_per_round",
                format!("must be in 1..={}, got {}", self.clients, self.participants_per_round),
            );
        }
        if self.batch_size == 0 {
            return bad("federation.batch_size", "must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("federation.learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if self.freeze_levels.is_empty() || self.clusters() > self.clients {
            return bad(
                "federation.freeze_levels",
                format!("need between 1 and {} clusters, got {}", self.clients, self.clusters()),
            );
        }
        if self.strategy == Strategy::Fedavg && self.freeze_levels.iter().any(|&l| l != 0) {
            return bad("federation.freeze_levels", "fedavg requires every level to be 0".into());
        }
        if self.toa.is_some() && self.qsgd_bits.is_some() {
            return bad("qsgd_bits", "cannot be combined with [toa]".into());
        }
        if let Some(b) = self.qsgd_bits {
            if !(1..=16).contains(&b) {
                return bad("qsgd_bits", format!("must be in 1..=16, got {b}"));
            }
        }
        Ok(())
    }

    fn check_levels(&self, layers: usize) -> Result<()> {
        match self.freeze_levels.iter().find(|&&l| l >= layers) {
            Some(&l) => Err(Error::config(
                "federation.freeze_levels",
                format!("level {l} leaves no trainable layer in a {layers}-layer model"),
            )),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub id: usize,
    pub shard: DatasetShard,
    pub n_k: usize,
    pub l_k: usize,
}

impl ClientRecord {
    pub fn new(id: usize, shard: DatasetShard, l_k: usize) -> Self {
        Self {
            id,
            n_k: shard.len(),
            shard,
            l_k,
        }
    }
}

/// Splits `clients` into `freeze_levels.len()` near-equal clusters by a
/// seeded permutation; returns each client's freezing level.
pub fn assign_capacity_clusters(clients: usize, freeze_levels: &[usize], seed: u64) -> Result<Vec<usize>> {
    let c = freeze_levels.len();
    if c == 0 || c > clients {
        return Err(Error::config(
            "federation.freeze_levels",
            format!("cannot form {c} clusters from {clients} clients"),
        ));
    }
    let mut perm: Vec<usize> = (0..clients).collect();
    perm.shuffle(&mut seed::rng(seed, Stream::Clusters, &[]));
    let mut levels = vec![0; clients];
    for (slot, &id) in perm.iter().enumerate() {
        levels[id] = freeze_levels[slot % c];
    }
    Ok(levels)
}

/// Uniform sample of `m` client ids without replacement, sorted.
pub fn sample_participants(clients: usize, m: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if m > clients {
        return Err(Error::Invalid(format!("cannot sample {m} of {clients} clients")));
    }
    let mut rng = seed::rng(seed, Stream::Participants, &[round as u64]);
    let mut ids = index::sample(&mut rng, clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Copies of the frozen layers `0..l_k` and active layers `l_k..N`.
pub fn decompose_model(global: &Model, l_k: usize) -> Result<(Vec<Layer>, Vec<Layer>)> {
    if l_k >= global.len() {
        return Err(Error::FreezeIndex {
            index: l_k,
            layers: global.len(),
        });
    }
    let copy = |ls: &[Layer]| ls.iter().map(Layer::detached).collect::<Vec<_>>();
    Ok((copy(&global.layers()[..l_k]), copy(&global.layers()[l_k..])))
}

fn client_rng(cfg: &FedConfig, round: usize, id: usize) -> SimRng {
    seed::rng(cfg.seed, Stream::ClientTrain, &[round as u64, id as u64])
}

/// `E` epochs of shuffled mini-batch SGD on whatever the model leaves
/// trainable. Returns the mean loss of the final epoch, or the inference
/// loss of the untouched model when `E = 0`.
pub fn train_local(model: &mut Model, shard: &DatasetShard, cfg: &FedConfig, rng: &mut SimRng) -> Result<f32> {
    if shard.is_empty() {
        return Err(Error::Empty("client shard"));
    }
    if cfg.local_epochs == 0 {
        return Ok(model.evaluate(shard)?.1 as f32);
    }
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut last = 0.0f64;
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = shard.batch(chunk);
            let out = model.forward(&x, true)?;
            let loss = model.backward(&out, &y)?;
            model.sgd_step(cfg.learning_rate)?;
            total += f64::from(loss) * chunk.len() as f64;
        }
        last = total / shard.len() as f64;
    }
    Ok(last as f32)
}

/// Local update of an ordered-freezing client. `frozen` may be a sparsified
/// stack; only `active` is trained and returned.
pub fn client_update(
    rec: &ClientRecord,
    frozen: &[Layer],
    active: &[Layer],
    cfg: &FedConfig,
    round: usize,
) -> Result<(Vec<Layer>, f32)> {
    let l = frozen.len();
    let layers: Vec<Layer> = frozen.iter().chain(active).map(Layer::detached).collect();
    let mut model = Model::from_layers(rec.shard.feature_shape(), layers)?;
    model.set_freeze_index(l)?;
    let loss = train_local(&mut model, &rec.shard, cfg, &mut client_rng(cfg, round, rec.id))?;
    let updated = model.into_layers().split_off(l).into_iter().map(|x| x.detached()).collect();
    Ok((updated, loss))
}

/// Random frozen set for the unordered baseline, fixed per client like the
/// ordered boundary it replaces. It
/// freezes as many parameterized layers as the ordered prefix `0..l_k` holds
/// (always leaving one trainable), chosen uniformly among all parameterized
/// layers. Parameterless layers carry no state and are marked frozen.
pub fn random_freeze_mask(global: &Model, l_k: usize, seed: u64, id: usize) -> Vec<bool> {
    let param: Vec<usize> = (0..global.len()).filter(|&i| global.layers()[i].kind().has_params()).collect();
    let frozen = param.iter().filter(|&&i| i < l_k).count().min(param.len().saturating_sub(1));
    let mut rng = seed::rng(seed, Stream::RandomFreeze, &[id as u64]);
    let mut mask: Vec<bool> = global.layers().iter().map(|l| !l.kind().has_params()).collect();
    for i in index::sample(&mut rng, param.len(), frozen) {
        mask[param[i]] = true;
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Final-epoch training loss per participant, in `participants` order.
    pub train_loss: Vec<f32>,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundHistory {
    pub rounds: Vec<RoundRecord>,
    pub ledger: CostLedger,
}

impl RoundHistory {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct FederatedRun {
    pub history: RoundHistory,
    pub global: Model,
    pub initial: Model,
    /// Freezing level of every client.
    pub levels: Vec<usize>,
}

struct ClientOutcome {
    upload: Upload,
    loss: f32,
    cost: ClientCost,
}

/// What the server sends a client below its boundary, and its wire size.
fn downlink_frozen(frozen: Vec<Layer>, cfg: &FedConfig, round: usize, id: usize) -> Result<(Vec<Layer>, u64)> {
    if frozen.len() < 2 {
        let bytes = frozen.iter().map(Layer::bytes).sum();
        return Ok((frozen, bytes));
    }
    if let Some(t) = &cfg.toa {
        let per_client = ToaConfig {
            s: t.s,
            seed: seed::derive(t.seed, Stream::Toa, &[round as u64, id as u64]),
        };
        let sp = toa::sparsify_frozen_stack(&frozen, &per_client)?;
        let bytes = sp.bytes();
        return Ok((sp.layers, bytes));
    }
    if let Some(bits) = cfg.qsgd_bits {
        let mut bytes = 0u64;
        let mut out = Vec::with_capacity(frozen.len());
        for (li, layer) in frozen.into_iter().enumerate() {
            let mut layer = layer;
            for (ti, p) in layer.params_mut().iter_mut().enumerate() {
                let s = seed::derive(cfg.seed, Stream::Qsgd, &[round as u64, id as u64, li as u64, ti as u64]);
                let (q, n) = toa::qsgd_quantize(p, bits, s)?;
                *p = q;
                bytes += n as u64;
            }
            out.push(layer);
        }
        return Ok((out, bytes));
    }
    let bytes = frozen.iter().map(Layer::bytes).sum();
    Ok((frozen, bytes))
}

fn run_client(global: &Model, rec: &ClientRecord, cfg: &FedConfig, round: usize) -> Result<ClientOutcome> {
    let e_samples = (cfg.local_epochs * rec.n_k) as u64;
    let batch = cfg.batch_size.min(rec.n_k);
    match cfg.strategy {
        Strategy::Fedolf | Strategy::Fedavg => {
            let (frozen, active) = decompose_model(global, rec.l_k)?;
            let (frozen, frozen_bytes) = downlink_frozen(frozen, cfg, round, rec.id)?;
            let active_bytes: u64 = active.iter().map(Layer::bytes).sum();
            let (updated, loss) = client_update(rec, &frozen, &active, cfg, round)?;

            let layers: Vec<Layer> = frozen.into_iter().chain(active).collect();
            let profile = ModelProfile::from_model(&Model::from_layers(rec.shard.feature_shape(), layers)?);
            let mem = costmodel::theoretical_memory(&profile, rec.l_k, batch, &MemoryMode::Ordered)?;
            let (ff, fb) = costmodel::flops_estimate(&profile, rec.l_k, 1)?;
            let upload = Upload::ordered(rec.id, rec.n_k, rec.l_k, updated);
            let cost = ClientCost {
                round,
                client_id: rec.id,
                l_k: rec.l_k,
                mem_bytes: mem,
                flops_forward: ff * e_samples,
                flops_backward: fb * e_samples,
                bytes_down: frozen_bytes + active_bytes,
                bytes_up: upload.bytes(),
            };
            Ok(ClientOutcome { upload, loss, cost })
        }
        Strategy::RandomFreeze => {
            let mask = random_freeze_mask(global, rec.l_k, cfg.seed, rec.id);
            let mut model = Model::from_layers(
                rec.shard.feature_shape(),
                global.layers().iter().map(Layer::detached).collect(),
            )?;
            model.set_frozen_mask(mask.clone())?;
            let loss = train_local(&mut model, &rec.shard, cfg, &mut client_rng(cfg, round, rec.id))?;
            let profile = ModelProfile::from_model(&model);
            let mem = costmodel::theoretical_memory(&profile, 0, batch, &MemoryMode::Mask(mask.clone()))?;
            let (ff, fb) = costmodel::flops_estimate_mask(&profile, &mask, 1)?;
            let layers = model
                .into_layers()
                .into_iter()
                .enumerate()
                .filter(|(i, l)| !mask[*i] && l.kind().has_params())
                .map(|(i, l)| (i, l.detached()))
                .collect();
            let upload = Upload {
                client_id: rec.id,
                n_k: rec.n_k,
                layers,
            };
            let cost = ClientCost {
                round,
                client_id: rec.id,
                l_k: rec.l_k,
                mem_bytes: mem,
                flops_forward: ff * e_samples,
                flops_backward: fb * e_samples,
                bytes_down: global.layers().iter().map(Layer::bytes).sum(),
                bytes_up: upload.bytes(),
            };
            Ok(ClientOutcome { upload, loss, cost })
        }
    }
}

/// Runs `T` rounds. Clients in a round train in parallel; every random draw is
/// keyed by `(seed, round, client)` and aggregation is ordered by client id,
/// so results match a sequential run bit for bit.
pub fn run_federated(cfg: &FedConfig, data: &PartitionedDataset, arch: &ArchitectureSpec) -> Result<FederatedRun> {
    cfg.validate()?;
    if data.shards.len() != cfg.clients {
        return Err(Error::config(
            "federation.clients",
            format!("config has {} clients but the partition has {}", cfg.clients, data.shards.len()),
        ));
    }
    let initial = Model::build(arch, cfg.seed)?;
    cfg.check_levels(initial.len())?;
    let levels = match cfg.strategy {
        Strategy::Fedavg => vec![0; cfg.clients],
        _ => assign_capacity_clusters(cfg.clients, &cfg.freeze_levels, cfg.seed)?,
    };
    let records: Vec<ClientRecord> = data
        .shards
        .iter()
        .enumerate()
        .map(|(id, s)| ClientRecord::new(id, s.clone(), levels[id]))
        .collect();
    if let Some(r) = records.iter().find(|r| r.n_k == 0) {
        return Err(Error::Invalid(format!("client {} has no data", r.id)));
    }
    let mut global = initial.clone();
    let mut history = RoundHistory::default();
    for round in 0..cfg.rounds {
        let participants = sample_participants(cfg.clients, cfg.participants_per_round, round, cfg.seed)?;
        let outcomes: Vec<ClientOutcome> = participants
            .par_iter()
            .map(|&id| run_client(&global, &records[id], cfg, round))
            .collect::<Result<_>>()?;
        let uploads: Vec<Upload> = outcomes.iter().map(|o| o.upload.clone()).collect();
        global = aggregate_layerwise(&global, &uploads)?;
        let (accuracy, loss) = global.evaluate(&data.holdout)?;
        history.rounds.push(RoundRecord {
            round,
            participants,
            train_loss: outcomes.iter().map(|o| o.loss).collect(),
            accuracy,
            loss,
        });
        for o in outcomes {
            history.ledger.push(o.cost);
        }
    }
    Ok(FederatedRun {
        history,
        global,
        initial,
        levels,
    })
}
