//! Analytical memory, FLOP, byte and energy accounting.
//!
//! Training memory of a client is `sum_q m_W + m_G + m_AM` over layers, where
//! `m_W` is parameter bytes, `m_G` gradient bytes (trainable layers only) and
//! `m_AM` the activation bytes kept for backpropagation (layers at or above
//! the lowest trainable one).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ArchitectureSpec, LayerKind, Model};
use crate::toa;

const F32: u64 = 4;

/// Per-layer sizes of an architecture, independent of any weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelProfile {
    pub kinds: Vec<LayerKind>,
    pub param_bytes: Vec<u64>,
    /// Activation elements per sample.
    pub activation_elems: Vec<u64>,
    /// Multiply-accumulates per sample.
    pub macs: Vec<u64>,
}

impl ModelProfile {
    pub fn from_arch(arch: &ArchitectureSpec) -> Result<Self> {
        let shapes = arch.shapes()?;
        Ok(Self::from_kinds(arch.kinds(), &shapes))
    }

    pub fn from_model(model: &Model) -> Self {
        let kinds: Vec<LayerKind> = model.layers().iter().map(|l| l.kind().clone()).collect();
        let shapes: Vec<Vec<usize>> = (0..=model.len()).map(|i| model.shape_at(i).to_vec()).collect();
        Self::from_kinds(kinds, &shapes)
    }

    fn from_kinds(kinds: Vec<LayerKind>, shapes: &[Vec<usize>]) -> Self {
        Self {
            param_bytes: kinds.iter().map(|k| k.param_count() as u64 * F32).collect(),
            activation_elems: kinds.iter().zip(shapes).map(|(k, s)| k.activation_elems(s)).collect(),
            macs: kinds.iter().zip(shapes).map(|(k, s)| k.macs(s)).collect(),
            kinds,
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn total_param_bytes(&self) -> u64 {
        self.param_bytes.iter().sum()
    }

    fn check_freeze(&self, l: usize) -> Result<()> {
        if l >= self.len() {
            return Err(Error::FreezeIndex {
                index: l,
                layers: self.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MemoryMode {
    /// Layers `0..l` frozen.
    Ordered,
    /// `l` frozen layers placed to maximize memory: backpropagation must
    /// reach the lowest trainable layer, whose position is chosen adversarially.
    RandomWorstCase,
    /// An explicit frozen set.
    Mask(Vec<bool>),
}

impl MemoryMode {
    pub fn name(&self) -> &'static str {
        match self {
            MemoryMode::Ordered => "ordered",
            MemoryMode::RandomWorstCase => "random_worst_case",
            MemoryMode::Mask(_) => "mask",
        }
    }
}

/// Memory of a training pass with trainable set `trainable` and
/// backpropagation reaching layer `lowest`.
fn memory_for(p: &ModelProfile, trainable: &[bool], lowest: usize, batch: u64) -> u64 {
    (0..p.len())
        .map(|q| {
            let grads = if trainable[q] { p.param_bytes[q] } else { 0 };
            let act = if q >= lowest { batch * p.activation_elems[q] * F32 } else { 0 };
            p.param_bytes[q] + grads + act
        })
        .sum()
}

/// Theoretical training memory in bytes with `l` frozen layers.
pub fn theoretical_memory(p: &ModelProfile, l: usize, batch: usize, mode: &MemoryMode) -> Result<u64> {
    let b = batch as u64;
    let n = p.len();
    match mode {
        MemoryMode::Ordered => {
            p.check_freeze(l)?;
            let trainable: Vec<bool> = (0..n).map(|q| q >= l).collect();
            Ok(memory_for(p, &trainable, l, b))
        }
        MemoryMode::RandomWorstCase => {
            p.check_freeze(l)?;
            // Lowest trainable layer at `low`; everything below it frozen, and
            // of the layers above it the heaviest `n - l - 1` are trainable.
            let mut worst = 0;
            for low in 0..=l {
                let mut above: Vec<usize> = (low + 1..n).collect();
                above.sort_by(|&a, &c| p.param_bytes[c].cmp(&p.param_bytes[a]).then(a.cmp(&c)));
                let mut trainable = vec![false; n];
                trainable[low] = true;
                for &q in above.iter().take(n - l - 1) {
                    trainable[q] = true;
                }
                worst = worst.max(memory_for(p, &trainable, low, b));
            }
            Ok(worst)
        }
        MemoryMode::Mask(mask) => {
            let lowest = check_mask(p, mask)?;
            let trainable: Vec<bool> = mask.iter().map(|f| !f).collect();
            Ok(memory_for(p, &trainable, lowest, b))
        }
    }
}

fn check_mask(p: &ModelProfile, mask: &[bool]) -> Result<usize> {
    let lowest = mask.iter().position(|f| !f);
    match lowest {
        Some(i) if mask.len() == p.len() => Ok(i),
        _ => Err(Error::FreezeIndex {
            index: mask.iter().filter(|&&f| f).count(),
            layers: p.len(),
        }),
    }
}

/// Forward and backward FLOPs (2 per multiply-accumulate) for one batch.
/// Backward costs two passes (input and weight gradients) for every layer
/// at or above the freezing boundary.
pub fn flops_estimate(p: &ModelProfile, l: usize, batch: usize) -> Result<(u64, u64)> {
    p.check_freeze(l)?;
    let b = batch as u64;
    let fwd: u64 = p.macs.iter().map(|m| 2 * m * b).sum();
    let bwd: u64 = p.macs[l..].iter().map(|m| 4 * m * b).sum();
    Ok((fwd, bwd))
}

/// FLOPs for an arbitrary frozen set: frozen layers between the lowest
/// trainable layer and the output still propagate input gradients.
pub fn flops_estimate_mask(p: &ModelProfile, mask: &[bool], batch: usize) -> Result<(u64, u64)> {
    let lowest = check_mask(p, mask)?;
    let b = batch as u64;
    let fwd: u64 = p.macs.iter().map(|m| 2 * m * b).sum();
    let bwd: u64 = (lowest..p.len())
        .map(|q| if mask[q] { 2 * p.macs[q] * b } else { 4 * p.macs[q] * b })
        .sum();
    Ok((fwd, bwd))
}

/// Download bytes for one client: the (possibly sparsified) frozen stack
/// plus the exact active layers. Sparsification applies only when `l >= 2`.
pub fn client_bytes(p: &ModelProfile, l: usize, s: Option<f64>) -> Result<(u64, u64)> {
    p.check_freeze(l)?;
    let up: u64 = p.param_bytes[l..].iter().sum();
    let frozen: u64 = match s {
        Some(s) if l >= 2 => toa::sparsified_param_count(&p.kinds[..l], s)? as u64 * F32,
        _ => p.param_bytes[..l].iter().sum(),
    };
    Ok((frozen + up, up))
}

/// Total download and upload bytes of a round with the given
/// `(l_k, toa scaling)` per participant.
pub fn round_bytes(p: &ModelProfile, plan: &[(usize, Option<f64>)]) -> Result<(u64, u64)> {
    plan.iter().try_fold((0, 0), |(d, u), &(l, s)| {
        let (cd, cu) = client_bytes(p, l, s)?;
        Ok((d + cd, u + cu))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyParams {
    pub joules_per_gflop: f64,
    pub joules_per_megabyte: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            joules_per_gflop: 1.0,
            joules_per_megabyte: 0.5,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("energy.joules_per_gflop", self.joules_per_gflop),
            ("energy.joules_per_megabyte", self.joules_per_megabyte),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn joules(&self, flops: u64, bytes: u64) -> f64 {
        flops as f64 / 1e9 * self.joules_per_gflop + bytes as f64 / 1e6 * self.joules_per_megabyte
    }
}

/// Costs of one client in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientCost {
    pub round: usize,
    pub client_id: usize,
    pub l_k: usize,
    pub mem_bytes: u64,
    pub flops_forward: u64,
    pub flops_backward: u64,
    pub bytes_down: u64,
    pub bytes_up: u64,
}

impl ClientCost {
    pub fn flops(&self) -> u64 {
        self.flops_forward + self.flops_backward
    }

    pub fn bytes(&self) -> u64 {
        self.bytes_down + self.bytes_up
    }

    pub fn joules(&self, e: &EnergyParams) -> f64 {
        e.joules(self.flops(), self.bytes())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    pub entries: Vec<ClientCost>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundEnergy {
    pub round: usize,
    pub joules: f64,
    pub cumulative: f64,
}

impl CostLedger {
    pub fn push(&mut self, c: ClientCost) {
        self.entries.push(c);
    }

    pub fn round(&self, round: usize) -> impl Iterator<Item = &ClientCost> {
        self.entries.iter().filter(move |c| c.round == round)
    }

    pub fn rounds(&self) -> usize {
        self.entries.iter().map(|c| c.round + 1).max().unwrap_or(0)
    }
}

/// Per-round and cumulative modeled energy.
pub fn energy(ledger: &CostLedger, e: &EnergyParams) -> Vec<RoundEnergy> {
    let mut cumulative = 0.0;
    (0..ledger.rounds())
        .map(|round| {
            let joules: f64 = ledger.round(round).map(|c| c.joules(e)).sum();
            cumulative += joules;
            RoundEnergy {
                round,
                joules,
                cumulative,
            }
        })
        .collect()
}
