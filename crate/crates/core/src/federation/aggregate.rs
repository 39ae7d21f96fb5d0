use crate::error::{Error, Result};
use crate::nn::{Layer, Model};
use crate::tensor::Tensor;

/// The layers one client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub n_k: usize,
    /// `(global layer index, trained layer)`, ascending by index.
    pub layers: Vec<(usize, Layer)>,
}

impl Upload {
    /// Upload of an ordered-freezing client: `active` holds layers `l_k..N`.
    pub fn ordered(client_id: usize, n_k: usize, l_k: usize, active: Vec<Layer>) -> Self {
        Self {
            client_id,
            n_k,
            layers: active.into_iter().enumerate().map(|(i, l)| (l_k + i, l)).collect(),
        }
    }

    pub fn bytes(&self) -> u64 {
        self.layers.iter().map(|(_, l)| l.bytes()).sum()
    }
}

/// Layer-wise weighted average: each layer becomes the `n_k`-weighted mean of
/// the uploads that contain it, renormalized over those uploads. Layers no
/// one uploaded keep their previous value. Sums run in `f64` in ascending
/// client id order, so the result does not depend on upload order.
pub fn aggregate_layerwise(global: &Model, uploads: &[Upload]) -> Result<Model> {
    let mut order: Vec<&Upload> = uploads.iter().collect();
    order.sort_by_key(|u| u.client_id);
    if order.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Invalid("two uploads from the same client".into()));
    }
    let n = global.len();
    let mut trainers: Vec<Vec<(usize, &Layer)>> = vec![Vec::new(); n];
    for u in &order {
        for (idx, layer) in &u.layers {
            if *idx >= n {
                return Err(Error::FreezeIndex { index: *idx, layers: n });
            }
            let g = &global.layers()[*idx];
            if layer.kind() != g.kind() {
                return Err(Error::shape(
                    "aggregate",
                    format!(
                        "client {} layer {idx} is {:?}, global is {:?}",
                        u.client_id,
                        layer.kind(),
                        g.kind()
                    ),
                ));
            }
            trainers[*idx].push((u.n_k, layer));
        }
    }
    let mut out = global.clone();
    for (idx, set) in trainers.iter().enumerate() {
        if set.is_empty() || !global.layers()[idx].kind().has_params() {
            continue;
        }
        let total: f64 = set.iter().map(|(nk, _)| *nk as f64).sum();
        if total <= 0.0 {
            return Err(Error::Invalid(format!("layer {idx} uploads carry no samples")));
        }
        let layer = out.layer_mut(idx);
        for (t, p) in layer.params_mut().iter_mut().enumerate() {
            let mut acc = vec![0.0f64; p.len()];
            for (nk, l) in set {
                let w = *nk as f64 / total;
                for (a, &v) in acc.iter_mut().zip(l.params()[t].data()) {
                    *a += w * f64::from(v);
                }
            }
            *p = Tensor::from_parts(p.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect());
        }
    }
    Ok(out)
}
