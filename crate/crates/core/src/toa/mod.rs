//! Frozen-stack sparsification by norm-weighted tensor sampling, and a
//! QSGD-style quantizer used as a communication baseline.
//!
//! For every parameterized frozen layer except the last, `floor(s * H)` of its
//! `H` output tensors (Dense rows, Conv2d filters) are kept. The consumer of
//! that output has its incoming slices restricted to the kept indices and
//! scaled by `1 / pi_j`, so its pre-activation is an unbiased estimate of the
//! exact one. Kept indices come from fixed-size systematic sampling with
//! inclusion probabilities `pi_j` proportional to tensor norms.

mod qsgd;
mod sampling;

pub use qsgd::{qsgd_decode, qsgd_encode, qsgd_payload_bytes, qsgd_quantize};
pub use sampling::{inclusion_probabilities, systematic_sample};

use crate::error::{Error, Result};
use crate::nn::{ConvGeom, Layer, LayerKind};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToaConfig {
    /// Fraction of tensors kept per reduced layer, in `(0, 1]`.
    pub s: f64,
    pub seed: u64,
}

impl ToaConfig {
    pub fn new(s: f64, seed: u64) -> Result<Self> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::Toa(format!("scaling factor s = {s} is outside (0, 1]")));
        }
        Ok(Self { s, seed })
    }
}

/// Addresses a weight/bias pair: a plain Dense/Conv2d layer, or the n-th body
/// convolution of a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub layer: usize,
    pub conv: Option<usize>,
}

/// One reduced producer and the consumer whose inputs were restricted.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduction {
    pub producer: Site,
    pub consumer: Site,
    /// Tensor count before reduction.
    pub units: usize,
    /// Strictly increasing.
    pub kept_indices: Vec<usize>,
    /// Multiplier applied to each kept tensor's contribution downstream.
    pub rescale: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsifiedStack {
    pub layers: Vec<Layer>,
    pub reductions: Vec<Reduction>,
}

impl SparsifiedStack {
    pub fn bytes(&self) -> u64 {
        self.layers.iter().map(Layer::bytes).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Step {
    producer: Site,
    consumer: Site,
    units: usize,
    keep: usize,
}

fn keep_count(units: usize, s: f64) -> usize {
    // Tolerate s * H landing a hair below an integer.
    ((s * units as f64) + 1e-9).floor() as usize
}

fn out_units(kind: &LayerKind) -> usize {
    match kind {
        LayerKind::Dense { outputs, .. } => *outputs,
        LayerKind::Conv2d(g) => g.out_channels,
        _ => 0,
    }
}

fn body_convs(kind: &LayerKind) -> Vec<ConvGeom> {
    match kind {
        LayerKind::Residual(b) => b
            .body
            .iter()
            .filter_map(|k| match k {
                LayerKind::Conv2d(g) => Some(*g),
                _ => None,
            })
            .collect(),
        _ => Vec::new(),
    }
}

/// Which weight pairs get reduced for a frozen stack of these kinds.
fn plan(kinds: &[LayerKind], s: f64) -> Result<Vec<Step>> {
    let param: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i].has_params()).collect();
    let mut steps = Vec::new();
    let mut push = |producer: Site, consumer: Site, units: usize| -> Result<()> {
        let keep = keep_count(units, s);
        if keep == 0 {
            return Err(Error::Toa(format!(
                "s = {s} keeps no tensors of layer {} ({units} tensors)",
                producer.layer
            )));
        }
        steps.push(Step {
            producer,
            consumer,
            units,
            keep,
        });
        Ok(())
    };
    for w in param.windows(2) {
        let (q, next) = (w[0], w[1]);
        match &kinds[q] {
            LayerKind::Residual(_) => {
                let convs = body_convs(&kinds[q]);
                for c in 0..convs.len().saturating_sub(1) {
                    push(
                        Site { layer: q, conv: Some(c) },
                        Site { layer: q, conv: Some(c + 1) },
                        convs[c].out_channels,
                    )?;
                }
            }
            // A residual block needs its full input for the shortcut sum.
            _ if matches!(kinds[next], LayerKind::Residual(_)) => {}
            k => push(
                Site { layer: q, conv: None },
                Site { layer: next, conv: None },
                out_units(k),
            )?,
        }
    }
    Ok(steps)
}

fn param_slot(site: Site) -> usize {
    site.conv.map_or(0, |c| 2 * c)
}

fn edit_kind(kind: &mut LayerKind, site: Site, f: impl FnOnce(&mut usize, &mut usize)) {
    match (kind, site.conv) {
        (LayerKind::Dense { inputs, outputs }, None) => f(inputs, outputs),
        (LayerKind::Conv2d(g), None) => f(&mut g.in_channels, &mut g.out_channels),
        (LayerKind::Residual(b), Some(n)) => {
            let g = b
                .body
                .iter_mut()
                .filter_map(|k| match k {
                    LayerKind::Conv2d(g) => Some(g),
                    _ => None,
                })
                .nth(n)
                .expect("planned site exists");
            f(&mut g.in_channels, &mut g.out_channels)
        }
        _ => unreachable!("planned site is a weight pair"),
    }
}

fn apply_shapes(kinds: &mut [LayerKind], steps: &[Step]) {
    for st in steps {
        // Dense inputs may span several values per producer unit (flattened
        // feature maps), so scale by the block size.
        edit_kind(&mut kinds[st.producer.layer], st.producer, |_, out| *out = st.keep);
        edit_kind(&mut kinds[st.consumer.layer], st.consumer, |inp, _| {
            *inp = *inp / st.units * st.keep;
        });
    }
}

/// Layer kinds after sparsification, without touching any parameters.
pub fn sparsified_kinds(kinds: &[LayerKind], s: f64) -> Result<Vec<LayerKind>> {
    let steps = plan(kinds, s)?;
    let mut out = kinds.to_vec();
    apply_shapes(&mut out, &steps);
    Ok(out)
}

/// Parameter count of a frozen stack after sparsification.
pub fn sparsified_param_count(kinds: &[LayerKind], s: f64) -> Result<usize> {
    Ok(sparsified_kinds(kinds, s)?.iter().map(LayerKind::param_count).sum())
}

/// Norm of each output tensor (weight slice plus its bias).
fn unit_norms(w: &Tensor, b: &Tensor) -> Vec<f64> {
    let rows = w.shape()[0];
    let len = w.len() / rows;
    (0..rows)
        .map(|j| {
            let sq: f64 = w.data()[j * len..(j + 1) * len]
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                + f64::from(b.data()[j]).powi(2);
            sq.sqrt()
        })
        .collect()
}

fn normalize(norms: &[f64]) -> Vec<f64> {
    let total: f64 = norms.iter().sum();
    if total > 0.0 && total.is_finite() {
        norms.iter().map(|n| n / total).collect()
    } else {
        vec![1.0 / norms.len() as f64; norms.len()]
    }
}

/// Sampling probabilities over a Dense/Conv2d layer's output tensors,
/// proportional to their Frobenius norms. An all-zero layer is uniform.
pub fn sampling_probabilities(layer: &Layer) -> Result<Vec<f64>> {
    match layer.kind() {
        LayerKind::Dense { .. } | LayerKind::Conv2d(_) => {
            let p = layer.params();
            Ok(normalize(&unit_norms(&p[0], &p[1])))
        }
        k => Err(Error::Toa(format!("{} layers have no sampled tensors", k.name()))),
    }
}

/// Keeps the listed leading-axis slices of `w`.
fn keep_outputs(w: &Tensor, kept: &[usize]) -> Tensor {
    w.select_rows(kept)
}

/// Restricts the input axis of a weight laid out as `[out, units * block]`
/// to the kept units, scaling each kept block.
fn restrict_inputs(w: &Tensor, units: usize, kept: &[usize], rescale: &[f32]) -> Tensor {
    let rows = w.shape()[0];
    let row_len = w.len() / rows;
    let block = row_len / units;
    let mut data = Vec::with_capacity(rows * kept.len() * block);
    for r in 0..rows {
        let row = &w.data()[r * row_len..(r + 1) * row_len];
        for (&j, &k) in kept.iter().zip(rescale) {
            let src = &row[j * block..(j + 1) * block];
            if k == 1.0 {
                data.extend_from_slice(src);
            } else {
                data.extend(src.iter().map(|v| v * k));
            }
        }
    }
    let mut shape = w.shape().to_vec();
    if shape.len() == 2 {
        shape[1] = kept.len() * block;
    } else {
        shape[1] = kept.len();
    }
    Tensor::from_parts(shape, data)
}

/// Sparsifies a frozen stack. The last parameterized layer stays intact, so
/// the stack's output keeps its shape; layers feeding a residual block and
/// residual shortcut paths are never reduced.
pub fn sparsify_frozen_stack(frozen: &[Layer], cfg: &ToaConfig) -> Result<SparsifiedStack> {
    if frozen.len() < 2 {
        return Err(Error::Toa(format!(
            "sparsification needs at least 2 frozen layers, got {}",
            frozen.len()
        )));
    }
    let kinds: Vec<LayerKind> = frozen.iter().map(|l| l.kind().clone()).collect();
    let steps = plan(&kinds, cfg.s)?;
    let mut params: Vec<Vec<Tensor>> = frozen.iter().map(|l| l.params().to_vec()).collect();
    let mut reductions = Vec::with_capacity(steps.len());
    for (n, st) in steps.iter().enumerate() {
        let ps = param_slot(st.producer);
        // Probabilities always come from the original weights.
        let orig = frozen[st.producer.layer].params();
        let p = normalize(&unit_norms(&orig[ps], &orig[ps + 1]));
        let pi = inclusion_probabilities(&p, st.keep);
        let mut rng = seed::rng(cfg.seed, Stream::Toa, &[n as u64]);
        let kept = systematic_sample(&pi, st.keep, &mut rng);
        let rescale: Vec<f32> = kept.iter().map(|&j| (1.0 / pi[j]) as f32).collect();

        let prod = &mut params[st.producer.layer];
        prod[ps] = keep_outputs(&prod[ps], &kept);
        prod[ps + 1] = keep_outputs(&prod[ps + 1], &kept);
        let cs = param_slot(st.consumer);
        let cons = &mut params[st.consumer.layer];
        cons[cs] = restrict_inputs(&cons[cs], st.units, &kept, &rescale);

        reductions.push(Reduction {
            producer: st.producer,
            consumer: st.consumer,
            units: st.units,
            kept_indices: kept,
            rescale,
        });
    }
    let mut new_kinds = kinds;
    apply_shapes(&mut new_kinds, &steps);
    let layers = new_kinds
        .into_iter()
        .zip(params)
        .map(|(k, p)| if k.has_params() { Layer::new(k, p) } else { Ok(Layer::parameterless(k)) })
        .collect::<Result<Vec<_>>>()?;
    Ok(SparsifiedStack { layers, reductions })
}

/// Parameter bytes of the original frozen stack and of its sparsified form.
pub fn downstream_bytes(original: &[Layer], sparsified: &SparsifiedStack) -> (u64, u64) {
    (original.iter().map(Layer::bytes).sum(), sparsified.bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchitectureSpec, Model};

    fn dense(rows: &[&[f32]], bias: &[f32]) -> Layer {
        let (o, i) = (rows.len(), rows[0].len());
        let w = Tensor::new(vec![o, i], rows.concat()).unwrap();
        Layer::new(LayerKind::Dense { inputs: i, outputs: o }, vec![w, Tensor::new(vec![o], bias.to_vec()).unwrap()])
            .unwrap()
    }

    #[test]
    fn probabilities_follow_norms() {
        let l = dense(&[&[3.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]);
        let p = sampling_probabilities(&l).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_layer_is_uniform() {
        let z: &[f32] = &[0.0; 3];
        let l = dense(&[z; 4], &[0.0; 4]);
        assert_eq!(sampling_probabilities(&l).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn parameterless_layer_has_no_probabilities() {
        assert!(sampling_probabilities(&Layer::parameterless(LayerKind::Relu)).is_err());
    }

    #[test]
    fn config_rejects_bad_s() {
        assert!(ToaConfig::new(0.0, 0).is_err());
        assert!(ToaConfig::new(1.5, 0).is_err());
        assert!(ToaConfig::new(1.0, 0).is_ok());
    }

    #[test]
    fn identity_at_s_one() {
        let m = Model::build(&ArchitectureSpec::mlp(6, &[8, 8], 3), 2).unwrap();
        let frozen = &m.layers()[..4];
        let sp = sparsify_frozen_stack(frozen, &ToaConfig::new(1.0, 9).unwrap()).unwrap();
        let orig: Vec<Layer> = frozen.iter().map(Layer::detached).collect();
        assert_eq!(sp.layers, orig);
        for r in &sp.reductions {
            assert_eq!(r.kept_indices, (0..r.units).collect::<Vec<_>>());
            assert!(r.rescale.iter().all(|&k| k == 1.0));
        }
    }

    #[test]
    fn dense_pair_halves() {
        let m = Model::build(&ArchitectureSpec::with_input(vec![4], vec![
            crate::nn::LayerSpec::Dense { inputs: 4, outputs: 4 },
            crate::nn::LayerSpec::Dense { inputs: 4, outputs: 2 },
        ]), 1)
        .unwrap();
        let sp = sparsify_frozen_stack(m.layers(), &ToaConfig::new(0.5, 3).unwrap()).unwrap();
        assert_eq!(sp.layers[0].kind(), &LayerKind::Dense { inputs: 4, outputs: 2 });
        assert_eq!(sp.layers[1].kind(), &LayerKind::Dense { inputs: 2, outputs: 2 });
        assert_eq!(sp.reductions.len(), 1);
    }

    #[test]
    fn single_layer_stack_is_rejected() {
        let m = Model::build(&ArchitectureSpec::mlp(4, &[], 2), 1).unwrap();
        assert!(sparsify_frozen_stack(m.layers(), &ToaConfig::new(0.5, 0).unwrap()).is_err());
    }

    #[test]
    fn too_small_s_is_a_toa_error() {
        let m = Model::build(&ArchitectureSpec::mlp(4, &[3], 2), 1).unwrap();
        let e = sparsify_frozen_stack(m.layers(), &ToaConfig::new(0.2, 0).unwrap()).unwrap_err();
        assert!(matches!(e, Error::Toa(_)));
    }

    #[test]
    fn kinds_plan_matches_real_sparsification() {
        for arch in [
            ArchitectureSpec::small_cnn([1, 8, 8], 3),
            ArchitectureSpec::resnet_like(1, 4),
            ArchitectureSpec::mlp(5, &[7, 6], 2),
        ] {
            let m = Model::build(&arch, 0).unwrap();
            for l in 2..m.len() {
                let frozen = &m.layers()[..l];
                let kinds: Vec<LayerKind> = frozen.iter().map(|x| x.kind().clone()).collect();
                let sp = sparsify_frozen_stack(frozen, &ToaConfig::new(0.5, 1).unwrap()).unwrap();
                let n: usize = sp.layers.iter().map(Layer::param_count).sum();
                assert_eq!(n, sparsified_param_count(&kinds, 0.5).unwrap());
            }
        }
    }
}
