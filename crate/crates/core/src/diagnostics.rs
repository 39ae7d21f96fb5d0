//! Empirical convergence constants and the error floors they imply.
//!
//! `L` is the smoothness constant, `gamma` bounds how far a client's gradient
//! strays from the global one, and `D` bounds how far a client's frozen-layer
//! gradient strays from its full-backprop gradient. Training with step size
//! `eta` reaches a point whose gradient norm is bounded by `epsilon`:
//!
//! * `eta <= 1/L`: `epsilon = D + gamma`;
//! * `1/L < eta < 3/(2L)`: `epsilon = [D(eta L - 1) + sqrt(r)] / (3 - 2 eta L)`
//!   with `r = eta D^2 L + 8 eta L gamma^2 + 6 eta D L gamma + D^2 - 3 gamma^2`;
//! * larger steps: no bound.

use rand_distr::{Distribution, StandardNormal};

use crate::data::DatasetShard;
use crate::error::{Error, Result};
use crate::federation::ClientRecord;
use crate::nn::Model;
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

const GRAD_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceConstants {
    pub l_hat: f64,
    pub gamma_hat: f64,
    pub d_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    SmallStep,
    LargeStep,
    Invalid,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::SmallStep => "small_step",
            Regime::LargeStep => "large_step",
            Regime::Invalid => "invalid",
        }
    }
}

/// Mean-loss gradient over the whole shard with the first `l` layers frozen,
/// zero on frozen coordinates, in `Model::flat_params` order.
pub fn shard_gradient(model: &Model, shard: &DatasetShard, l: usize) -> Result<Vec<f64>> {
    if shard.is_empty() {
        return Err(Error::Empty("shard"));
    }
    let mut m = model.clone();
    m.set_freeze_index(l)?;
    let mut g = vec![0.0f64; m.param_count()];
    let idx: Vec<usize> = (0..shard.len()).collect();
    for chunk in idx.chunks(GRAD_CHUNK) {
        let (x, y) = shard.batch(chunk);
        let out = m.forward(&x, true)?;
        m.backward(&out, &y)?;
        let w = chunk.len() as f64 / shard.len() as f64;
        for (a, v) in g.iter_mut().zip(m.flat_grads()) {
            *a += w * f64::from(v);
        }
    }
    Ok(g)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `||grad f_k - grad f'_k||` between full backpropagation and backpropagation
/// with `l_k` frozen layers (frozen coordinates zero-padded).
pub fn gradient_divergence(model: &Model, shard: &DatasetShard, l_k: usize) -> Result<f64> {
    if l_k == 0 {
        return Ok(0.0);
    }
    let full = shard_gradient(model, shard, 0)?;
    let frozen = shard_gradient(model, shard, l_k)?;
    Ok(dist(&full, &frozen))
}

/// `sqrt(sum_k w_k ||g_k - g||^2)` with `w_k = n_k / n` and `g` the weighted
/// mean gradient.
pub fn estimate_gamma_from(grads: &[(usize, Vec<f64>)]) -> Result<f64> {
    if grads.len() < 2 {
        return Err(Error::Invalid("gamma needs at least two clients".into()));
    }
    if grads.iter().any(|(_, g)| g.len() != grads[0].1.len()) {
        return Err(Error::shape("estimate_gamma", "client gradients differ in length"));
    }
    let n: f64 = grads.iter().map(|(nk, _)| *nk as f64).sum();
    // Shifted by the first gradient so that agreeing clients give exactly 0.
    let g0 = &grads[0].1;
    let mut mean = g0.clone();
    for (nk, g) in grads {
        for ((m, v), z) in mean.iter_mut().zip(g).zip(g0) {
            *m += *nk as f64 / n * (v - z);
        }
    }
    let var: f64 = grads.iter().map(|(nk, g)| *nk as f64 / n * dist(g, &mean).powi(2)).sum();
    Ok(var.sqrt())
}

pub fn estimate_gamma(clients: &[ClientRecord], model: &Model) -> Result<f64> {
    let grads = clients
        .iter()
        .map(|c| Ok((c.n_k, shard_gradient(model, &c.shard, 0)?)))
        .collect::<Result<Vec<_>>>()?;
    estimate_gamma_from(&grads)
}

/// Running maximum of `||grad(w1) - grad(w2)|| / ||w1 - w2||` over `trials`
/// seeded pairs drawn as `w0 + radius * N(0, I)`. Identical pairs are skipped.
/// Returns one estimate per trial so callers can inspect convergence.
pub fn estimate_l_with(
    grad: impl Fn(&[f64]) -> Result<Vec<f64>>,
    w0: &[f64],
    trials: usize,
    radius: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::Invalid("estimate_l needs at least one trial".into()));
    }
    let mut best = 0.0f64;
    let mut trace = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = seed::rng(seed, Stream::Diagnostics, &[t as u64]);
        let mut draw = || -> Vec<f64> {
            w0.iter()
                .map(|w| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    w + radius * z
                })
                .collect()
        };
        let (w1, w2) = (draw(), draw());
        let dw = dist(&w1, &w2);
        if dw > 0.0 {
            let dg = dist(&grad(&w1)?, &grad(&w2)?);
            best = best.max(dg / dw);
        }
        trace.push(best);
    }
    Ok(trace)
}

/// Smoothness estimate of the shard loss around the model's parameters.
pub fn estimate_l(model: &Model, shard: &DatasetShard, trials: usize, seed: u64) -> Result<f64> {
    let w0: Vec<f64> = model.flat_params().into_iter().map(f64::from).collect();
    let grad = |w: &[f64]| {
        let mut m = model.clone();
        let flat: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        m.set_flat_params(&flat)?;
        shard_gradient(&m, shard, 0)
    };
    let trace = estimate_l_with(grad, &w0, trials, 0.05, seed)?;
    Ok(*trace.last().expect("at least one trial"))
}

/// Error floor for step size `eta`. `None` when no bound applies.
pub fn epsilon_bounds(eta: f64, l: f64, gamma: f64, d: f64) -> (Option<f64>, Regime) {
    if !(eta > 0.0) || l < 0.0 || gamma < 0.0 || d < 0.0 || [eta, l, gamma, d].iter().any(|v| !v.is_finite()) {
        return (None, Regime::Invalid);
    }
    let el = eta * l;
    if el <= 1.0 {
        return (Some(d + gamma), Regime::SmallStep);
    }
    if el >= 1.5 {
        return (None, Regime::Invalid);
    }
    let r = eta * d * d * l + 8.0 * eta * l * gamma * gamma + 6.0 * eta * d * l * gamma + d * d - 3.0 * gamma * gamma;
    // With eta L > 1 the radicand exceeds 5 gamma^2 >= 0; kept as a guard.
    if r < 0.0 {
        return (None, Regime::Invalid);
    }
    (Some((d * (el - 1.0) + r.sqrt()) / (3.0 - 2.0 * el)), Regime::LargeStep)
}

fn centered(t: &Tensor) -> (usize, usize, Vec<f64>) {
    let n = t.rows();
    let f = t.len() / n.max(1);
    let mut x: Vec<f64> = t.data().iter().map(|&v| f64::from(v)).collect();
    for j in 0..f {
        let mean = (0..n).map(|i| x[i * f + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * f + j] -= mean;
        }
    }
    (n, f, x)
}

/// `||A^T B||_F^2` for row-major `n x fa` and `n x fb` matrices.
fn cross_norm_sq(n: usize, a: &[f64], fa: usize, b: &[f64], fb: usize) -> f64 {
    let mut total = 0.0;
    for p in 0..fa {
        for q in 0..fb {
            let s: f64 = (0..n).map(|i| a[i * fa + p] * b[i * fb + q]).sum();
            total += s * s;
        }
    }
    total
}

/// Linear centered kernel alignment between two `samples x features`
/// representations. Zero when either side has no variance.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() != y.rows() || x.rows() < 2 {
        return Err(Error::shape(
            "linear_cka",
            format!("need matching sample counts >= 2, got {} and {}", x.rows(), y.rows()),
        ));
    }
    let (n, fx, a) = centered(x);
    let (_, fy, b) = centered(y);
    let xy = cross_norm_sq(n, &b, fy, &a, fx);
    let xx = cross_norm_sq(n, &a, fx, &a, fx).sqrt();
    let yy = cross_norm_sq(n, &b, fy, &b, fy).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Ok(0.0);
    }
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

/// Root-mean-square per-sample distance between the outputs of layer `l - 1`
/// of two models sharing an architecture, e.g. a stale frozen stack versus a
/// freshly trained one.
pub fn representation_error(stale: &Model, fresh: &Model, l: usize, batch: &Tensor) -> Result<f64> {
    if l == 0 {
        return Ok(0.0);
    }
    if l > stale.len() || l > fresh.len() {
        return Err(Error::FreezeIndex {
            index: l,
            layers: stale.len().min(fresh.len()),
        });
    }
    let a = &stale.layer_outputs(batch)?[l - 1];
    let b = &fresh.layer_outputs(batch)?[l - 1];
    if a.shape() != b.shape() {
        return Err(Error::shape("representation_error", "models disagree on layer output shape"));
    }
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2))
        .sum();
    Ok((sq / batch.rows() as f64).sqrt())
}
