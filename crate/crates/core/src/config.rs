//! Experiment configuration: a single TOML file, every key validated before
//! anything runs, with defaults echoed back by `resolved_toml`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::costmodel::EnergyParams;
use crate::data::{self, DatasetShard, PartitionedDataset};
use crate::error::{Error, Result};
use crate::federation::{FedConfig, Strategy};
use crate::nn::{ArchitectureSpec, LayerSpec};
use crate::toa::ToaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toa: Option<ToaSection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub energy: EnergyParams,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub bench: BenchSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("fedolf-out")
}

// Desk-scale defaults; the reference setting is 100 clients, 500 rounds and
// 5 local epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub clients: usize,
    pub participants_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub freeze_levels: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qsgd_bits: Option<u32>,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            clients: 10,
            participants_per_round: 5,
            rounds: 50,
            local_epochs: 2,
            learning_rate: 0.02,
            batch_size: 16,
            strategy: Strategy::Fedolf,
            freeze_levels: vec![0],
            qsgd_bits: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToaSection {
    pub s: f64,
    /// Defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Mlp,
    SmallCnn,
    AlexnetLike,
    ResnetLike,
    Resnet20Like,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// Hidden widths of the `mlp` preset.
    pub hidden: Vec<usize>,
    /// Blocks per stage of the `resnet_like` preset.
    pub blocks_per_stage: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: None,
            hidden: vec![64, 32],
            blocks_per_stage: 3,
            input_shape: None,
            layers: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: Source,
    /// CSV file with a `label,f0,f1,...` header.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub spread: f32,
    /// Per-sample feature shape, e.g. `[1, 8, 8]` for convolutional models.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    pub holdout_fraction: f64,
    pub partition: Partition,
    pub alpha: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            path: None,
            samples: 2000,
            features: 8,
            classes: 4,
            spread: 0.35,
            shape: None,
            holdout_fraction: 0.2,
            partition: Partition::Dirichlet,
            alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub enabled: bool,
    /// Perturbation pairs for the smoothness estimate.
    pub l_trials: usize,
    /// Samples used for the smoothness estimate.
    pub l_samples: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            enabled: true,
            l_trials: 5,
            l_samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub s_grid: Vec<f64>,
    /// Allowed relative byte gap when matching a QSGD bit width to TOA.
    pub budget_tolerance: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            s_grid: vec![0.25, 0.5, 0.75, 1.0],
            budget_tolerance: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".into());
            Error::config(key, e.message().trim().to_string())
        })?;
        if cfg.model.layers.is_none() && cfg.model.preset.is_none() {
            cfg.model.preset = Some(Preset::Mlp);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The configuration with every default spelled out.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn fed_config(&self) -> Result<FedConfig> {
        let f = &self.federation;
        let toa = match &self.toa {
            Some(t) => Some(ToaConfig::new(t.s, t.seed.unwrap_or(self.seed)).map_err(|e| Error::config("toa.s", e.to_string()))?),
            None => None,
        };
        Ok(FedConfig {
            clients: f.clients,
            participants_per_round: f.participants_per_round,
            rounds: f.rounds,
            local_epochs: f.local_epochs,
            learning_rate: f.learning_rate,
            batch_size: f.batch_size,
            freeze_levels: f.freeze_levels.clone(),
            strategy: f.strategy,
            toa,
            qsgd_bits: f.qsgd_bits,
            seed: self.seed,
        })
    }

    /// Per-sample feature shape implied by the data section.
    pub fn feature_shape(&self) -> Vec<usize> {
        self.data.shape.clone().unwrap_or_else(|| vec![self.data.features])
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        let m = &self.model;
        let classes = self.data.classes;
        let shape = self.feature_shape();
        let arch = match (&m.layers, m.preset) {
            (Some(layers), _) => {
                let input = m.input_shape.clone().unwrap_or_else(|| shape.clone());
                ArchitectureSpec::with_input(input, layers.clone())
            }
            (None, Some(Preset::Mlp)) => {
                ArchitectureSpec::mlp(shape.iter().product(), &m.hidden, classes)
            }
            (None, Some(Preset::SmallCnn)) => match shape.as_slice() {
                &[c, h, w] => ArchitectureSpec::small_cnn([c, h, w], classes),
                _ => return Err(Error::config("model.preset", "small_cnn needs a [c, h, w] data.shape")),
            },
            (None, Some(Preset::AlexnetLike)) => ArchitectureSpec::alexnet_like(shape[0], classes),
            (None, Some(Preset::ResnetLike)) => ArchitectureSpec::resnet_like(m.blocks_per_stage, classes),
            (None, Some(Preset::Resnet20Like)) => ArchitectureSpec::resnet20_like(classes),
            (None, None) => return Err(Error::config("model", "set either `preset` or `layers`")),
        };
        arch.shapes()?;
        Ok(arch)
    }

    fn validate(&self) -> Result<()> {
        if self.model.layers.is_some() && self.model.preset.is_some() {
            return Err(Error::config("model", "`preset` and `layers` are mutually exclusive"));
        }
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::config("data.classes", "need at least 2 classes"));
        }
        if !(0.0..1.0).contains(&d.holdout_fraction) || d.holdout_fraction == 0.0 {
            return Err(Error::config("data.holdout_fraction", "must be in (0, 1)"));
        }
        if d.partition == Partition::Dirichlet && !(d.alpha > 0.0 && d.alpha.is_finite()) {
            return Err(Error::config("data.alpha", format!("must be positive, got {}", d.alpha)));
        }
        match d.source {
            Source::Csv if d.path.is_none() => return Err(Error::config("data.path", "required when source = \"csv\"")),
            Source::Synthetic if d.samples == 0 || d.features == 0 => {
                return Err(Error::config("data.samples", "synthetic data needs samples > 0 and features > 0"))
            }
            _ => {}
        }
        if let Some(shape) = &d.shape {
            if shape.iter().product::<usize>() != d.features || shape.is_empty() {
                return Err(Error::config(
                    "data.shape",
                    format!("{shape:?} does not hold {} features", d.features),
                ));
            }
        }
        if let Some(t) = &self.toa {
            ToaConfig::new(t.s, 0).map_err(|e| Error::config("toa.s", e.to_string()))?;
        }
        self.energy.validate()?;
        if self.bench.s_grid.iter().any(|&s| !(s > 0.0 && s <= 1.0)) || self.bench.s_grid.is_empty() {
            return Err(Error::config("bench.s_grid", "values must lie in (0, 1]"));
        }
        if self.diagnostics.l_trials == 0 || self.diagnostics.l_samples == 0 {
            return Err(Error::config("diagnostics", "l_trials and l_samples must be positive"));
        }
        self.fed_config()?.validate()?;
        let arch = self.architecture()?;
        if let Some(&l) = self.federation.freeze_levels.iter().find(|&&l| l >= arch.len()) {
            return Err(Error::config(
                "federation.freeze_levels",
                format!("level {l} leaves no trainable layer in a {}-layer model", arch.len()),
            ));
        }
        Ok(())
    }

    /// Loads or generates the full dataset (features reshaped to
    /// `feature_shape`).
    pub fn dataset(&self, base: &Path) -> Result<DatasetShard> {
        let d = &self.data;
        let flat = match d.source {
            Source::Synthetic => data::synth_blobs(d.samples, d.features, d.classes, d.spread, self.seed)?,
            Source::Csv => {
                let p = d.path.as_ref().expect("validated");
                let p = if p.is_relative() { base.join(p) } else { p.clone() };
                data::load_csv(&p, d.classes)?
            }
        };
        let shape = self.feature_shape();
        if flat.feature_dim() != shape.iter().product::<usize>() {
            return Err(Error::config(
                "data.features",
                format!("data has {} features per sample, config says {shape:?}", flat.feature_dim()),
            ));
        }
        let idx: Vec<usize> = (0..flat.len()).collect();
        let (x, y) = flat.batch(&idx);
        let mut full_shape = vec![flat.len()];
        full_shape.extend(&shape);
        DatasetShard::new(x.reshape(full_shape)?, y, d.classes)
    }

    /// Holdout split plus client partition. Also returns, per client, the
    /// indices of its samples in the full dataset.
    pub fn partition(&self, full: &DatasetShard) -> Result<(PartitionedDataset, Vec<Vec<usize>>)> {
        let split = data::split_holdout(full, self.data.holdout_fraction, self.seed)?;
        if split.holdout.is_empty() {
            return Err(Error::config("data.holdout_fraction", "holdout set is empty"));
        }
        let k = self.federation.clients;
        let parts = match self.data.partition {
            Partition::Iid => data::iid_partition(&split.train, k, self.seed)?,
            Partition::Dirichlet => data::dirichlet_partition(&split.train, k, self.data.alpha, self.seed)?,
        };
        let source_idx = parts
            .assignment
            .iter()
            .map(|a| a.iter().map(|&i| split.train_index[i]).collect())
            .collect();
        Ok((parts.with_holdout(split.holdout), source_idx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_uses_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c.federation.clients, 10);
        assert_eq!(c.federation.participants_per_round, 5);
        assert_eq!(c.federation.rounds, 50);
        assert_eq!(c.federation.local_epochs, 2);
        assert_eq!(c.federation.batch_size, 16);
        assert_eq!(c.energy, EnergyParams::default());
        assert_eq!(c.bench.s_grid, vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn resolved_round_trips() {
        let c = ExperimentConfig::from_toml_str("seed = 3\n[toa]\ns = 0.5\n").unwrap();
        let again = ExperimentConfig::from_toml_str(&c.resolved_toml()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = ExperimentConfig::from_toml_str("[federation]\nclientz = 3\n").unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("clientz"), "{e}");
    }

    #[test]
    fn bad_value_is_named() {
        let e = ExperimentConfig::from_toml_str("[federation]\nparticipants_per_round = 11\n").unwrap_err();
        assert!(e.to_string().contains("federation.participants_per_round"), "{e}");
        let e = ExperimentConfig::from_toml_str("[federation]\nfreeze_levels = [9]\n").unwrap_err();
        assert!(e.to_string().contains("federation.freeze_levels"), "{e}");
        let e = ExperimentConfig::from_toml_str("[toa]\ns = 0.0\n").unwrap_err();
        assert!(e.to_string().contains("toa.s"), "{e}");
    }

    #[test]
    fn explicit_layers() {
        let text = r#"
[data]
features = 4
[model]
layers = [
  { kind = "dense", inputs = 4, outputs = 3 },
  { kind = "relu" },
  { kind = "dense", inputs = 3, outputs = 4 },
]
"#;
        let c = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(c.model.preset, None);
        assert_eq!(c.architecture().unwrap().len(), 3);
    }

    #[test]
    fn partition_maps_back_to_source() {
        let c = ExperimentConfig::from_toml_str("[data]\nsamples = 200\n").unwrap();
        let full = c.dataset(Path::new(".")).unwrap();
        let (p, idx) = c.partition(&full).unwrap();
        assert_eq!(p.holdout.len(), 40);
        for (shard, ids) in p.shards.iter().zip(&idx) {
            for (j, &i) in ids.iter().enumerate() {
                assert_eq!(shard.sample(j), full.sample(i));
            }
        }
    }
}
