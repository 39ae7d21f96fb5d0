//! Helpers shared by the integration tests.
#![allow(dead_code)]

use fedolf::data::{DatasetShard, PartitionedDataset};
use fedolf::federation::{self, FedConfig};
use fedolf::nn::{ArchitectureSpec, LayerSpec, Model};
use fedolf::seed::{self, SimRng, Stream};
use fedolf::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn test_rng(tag: u64, i: u64) -> SimRng {
    seed::rng(0xacce_57, Stream::Diagnostics, &[tag, i])
}

pub fn uniform_tensor(shape: Vec<usize>, rng: &mut SimRng, bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Model built from `arch` with every parameter (biases included) jittered.
pub fn jittered(arch: &ArchitectureSpec, rng: &mut SimRng) -> Model {
    let mut m = Model::build(arch, rng.random()).unwrap();
    let flat: Vec<f32> = m.flat_params().iter().map(|v| v + rng.random_range(-0.2..0.2)).collect();
    m.set_flat_params(&flat).unwrap();
    m
}

pub fn conv(i: usize, o: usize, k: usize, s: usize, p: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: s,
        padding: p,
    }
}

pub fn dense(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Dense { inputs: i, outputs: o }
}

/// A random small network exercising layer kind `kind`, plus a matching batch.
pub fn instance(kind: &str, rng: &mut SimRng) -> (Model, Tensor, Vec<usize>) {
    let classes = rng.random_range(2..5);
    let batch = rng.random_range(2..5);
    let (input, layers): (Vec<usize>, Vec<LayerSpec>) = match kind {
        "dense" => {
            let d = rng.random_range(2..7);
            (vec![d], vec![dense(d, classes)])
        }
        "relu" => {
            let (d, h) = (rng.random_range(2..7), rng.random_range(3..8));
            (vec![d], vec![dense(d, h), LayerSpec::Relu, dense(h, classes)])
        }
        "conv2d" | "flatten" => {
            let (c, o, k) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            let (s, p) = (rng.random_range(1..3), rng.random_range(0..2));
            let hw = rng.random_range(k.max(3)..7);
            let out = (hw + 2 * p - k) / s + 1;
            let mut layers = vec![conv(c, o, k, s, p)];
            if kind == "flatten" {
                layers.push(LayerSpec::Flatten);
            }
            layers.push(dense(o * out * out, classes));
            (vec![c, hw, hw], layers)
        }
        "maxpool2d" => {
            let (c, o, size) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..4));
            let hw = rng.random_range(size..8);
            let out = hw / size;
            let layers = vec![
                conv(c, o, 3, 1, 1),
                LayerSpec::MaxPool2d { size },
                LayerSpec::Flatten,
                dense(o * out * out, classes),
            ];
            (vec![c, hw, hw], layers)
        }
        "residual" => {
            let (c, o, s) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3));
            let hw = rng.random_range(3..6);
            let out = (hw + 2 - 3) / s + 1;
            let layers = vec![
                LayerSpec::Residual {
                    in_channels: c,
                    out_channels: o,
                    stride: s,
                },
                LayerSpec::Flatten,
                dense(o * out * out, classes),
            ];
            (vec![c, hw, hw], layers)
        }
        other => panic!("unknown kind {other}"),
    };
    let arch = ArchitectureSpec::with_input(input.clone(), layers);
    let model = jittered(&arch, rng);
    let mut shape = vec![batch];
    shape.extend(input);
    let x = uniform_tensor(shape, rng, 1.0);
    let y = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    (model, x, y)
}

pub const KINDS: [&str; 6] = ["dense", "conv2d", "relu", "maxpool2d", "flatten", "residual"];

/// Relative error between backprop and `f64` central differences over up to
/// `max_coords` sampled parameters, or `None` when a perturbation lands too
/// close to a ReLU/max-pool kink for differences to mean anything.
pub fn grad_check(model: &mut Model, x: &Tensor, y: &[usize], max_coords: usize, rng: &mut SimRng) -> Option<f64> {
    const H: f64 = 1e-6;
    const MIN_MARGIN: f64 = 1e-4;
    let out = model.forward(x, true).unwrap();
    model.backward(&out, y).unwrap();
    let analytic = model.flat_grads();

    let base = model.shadow_params();
    let mut slots = Vec::new();
    for (l, tensors) in base.iter().enumerate() {
        for (t, v) in tensors.iter().enumerate() {
            slots.extend((0..v.len()).map(|e| (l, t, e)));
        }
    }
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.shuffle(rng);
    order.truncate(max_coords);

    if model.shadow_loss(&base, x, y).unwrap().kink_margin < MIN_MARGIN {
        return None;
    }
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for &flat in &order {
        let (l, t, e) = slots[flat];
        let mut p = base.clone();
        p[l][t][e] += H;
        let plus = model.shadow_loss(&p, x, y).unwrap();
        p[l][t][e] -= 2.0 * H;
        let minus = model.shadow_loss(&p, x, y).unwrap();
        if plus.kink_margin < MIN_MARGIN || minus.kink_margin < MIN_MARGIN {
            return None;
        }
        let fd = (plus.loss - minus.loss) / (2.0 * H);
        diff += (f64::from(analytic[flat]) - fd).powi(2);
        norm += fd * fd;
    }
    Some(diff.sqrt() / norm.sqrt().max(1e-12))
}

pub fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum();
    let n: f64 = b.iter().map(|&y| f64::from(y).powi(2)).sum();
    d.sqrt() / n.sqrt().max(1e-30)
}

/// Number of flat parameters held by layers `0..l`.
pub fn param_offset(model: &Model, l: usize) -> usize {
    model.layers()[..l].iter().map(|x| x.param_count()).sum()
}

pub struct ReferenceRound {
    pub participants: Vec<usize>,
    pub accuracy: f64,
    pub loss: f64,
}

/// Plain FedAvg written against the model API only: every participant trains
/// the whole model and the server takes the sample-weighted mean of the full
/// flat parameter vectors, summing in `f64` by ascending client id.
pub fn reference_fedavg(
    cfg: &FedConfig,
    data: &PartitionedDataset,
    arch: &ArchitectureSpec,
) -> (Vec<ReferenceRound>, Model) {
    let mut global = Model::build(arch, cfg.seed).unwrap();
    let mut rounds = Vec::new();
    for t in 0..cfg.rounds {
        let ids = federation::sample_participants(cfg.clients, cfg.participants_per_round, t, cfg.seed).unwrap();
        let mut locals = Vec::new();
        for &id in &ids {
            let shard: &DatasetShard = &data.shards[id];
            let mut m = global.clone();
            let mut rng = seed::rng(cfg.seed, Stream::ClientTrain, &[t as u64, id as u64]);
            let mut order: Vec<usize> = (0..shard.len()).collect();
            for _ in 0..cfg.local_epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let (x, y) = shard.batch(chunk);
                    let out = m.forward(&x, true).unwrap();
                    m.backward(&out, &y).unwrap();
                    m.sgd_step(cfg.learning_rate).unwrap();
                }
            }
            locals.push((shard.len(), m.flat_params()));
        }
        let n: f64 = locals.iter().map(|(nk, _)| *nk as f64).sum();
        let mut acc = vec![0.0f64; global.param_count()];
        for (nk, w) in &locals {
            let share = *nk as f64 / n;
            for (a, &v) in acc.iter_mut().zip(w) {
                *a += share * f64::from(v);
            }
        }
        let flat: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        global.set_flat_params(&flat).unwrap();
        let (accuracy, loss) = global.evaluate(&data.holdout).unwrap();
        rounds.push(ReferenceRound {
            participants: ids,
            accuracy,
            loss,
        });
    }
    (rounds, global)
}

/// The end-to-end smoke setup: 4-class synthetic blobs over 10 clients with a
/// Dirichlet(0.1) split, 5 participants per round, 50 rounds.
pub fn smoke_toml(seed: u64, strategy: &str, toa: Option<f64>) -> String {
    let levels = if strategy == "fedavg" { "[0]" } else { "[4, 3, 2, 1, 0]" };
    let mut s = format!(
        r#"seed = {seed}
[federation]
clients = 10
participants_per_round = 5
rounds = 50
local_epochs = 2
learning_rate = 0.02
batch_size = 16
strategy = "{strategy}"
freeze_levels = {levels}
[model]
preset = "mlp"
hidden = [64, 32]
[data]
samples = 2000
features = 8
classes = 4
spread = 0.35
partition = "dirichlet"
alpha = 0.1
[diagnostics]
enabled = false
"#
    );
    if let Some(v) = toa {
        s.push_str(&format!("[toa]\ns = {v}\n"));
    }
    s
}

/// Small, fast run configuration for CLI-level tests.
pub fn tiny_toml(seed: u64, rounds: usize) -> String {
    format!(
        r#"seed = {seed}
[federation]
clients = 4
participants_per_round = 2
rounds = {rounds}
local_epochs = 1
batch_size = 8
freeze_levels = [0, 2]
[model]
preset = "mlp"
hidden = [8, 6]
[data]
samples = 160
features = 4
classes = 3
[diagnostics]
l_trials = 2
l_samples = 32
"#
    )
}
