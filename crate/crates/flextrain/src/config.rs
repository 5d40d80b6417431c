//! JSON run configuration: strict schema (unknown keys rejected), range
//! validation before any computation, and builders that turn one config into
//! datasets, networks, training and federation setups.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::{
    gen_blobs, gen_spiral, load_csv, load_idx, partition_dirichlet, partition_iid, Dataset,
    PartitionPlan, SplitTag,
};
use crate::error::{Error, Result};
use crate::fed::{AggregationMode, DeviceProfile, FederationConfig, Weighting};
use crate::losses::DistillMode;
use crate::nn::{ModelSpec, ResidualNet};
use crate::report::ReportFormat;
use crate::sampler::{fraction_to_depth, ActivationDistribution};
use crate::trainer::TrainConfig;
use crate::{derive_seed, streams};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub federation: Option<FederationSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub num_blocks: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `spiral`, `blobs`, `idx`, or `csv`.
    pub generator: String,
    pub n_per_class: Option<usize>,
    pub num_classes: Option<usize>,
    pub noise_std: Option<f64>,
    pub dim: Option<usize>,
    pub separation: Option<f64>,
    /// Test-set size for synthetic generators; defaults to `n_per_class`.
    pub test_n_per_class: Option<usize>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    #[serde(default)]
    pub partition: Option<PartitionSection>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    /// `iid` or `dirichlet`.
    pub method: String,
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub distill_mode: DistillMode,
    pub pi: Vec<PiEntry>,
    #[serde(default)]
    pub eval_depths: Option<Vec<usize>>,
    #[serde(default)]
    pub sample_per_epoch: bool,
    /// Step decay schedule; both default to off/1.0 (constant rate).
    #[serde(default)]
    pub lr_decay_every: Option<usize>,
    #[serde(default = "default_lr_decay_factor")]
    pub lr_decay_factor: f64,
    /// Checkpoint every N epochs (centralized runs).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_lr_decay_factor() -> f64 {
    1.0
}

/// One π entry: a probability attached either to an explicit depth or to a
/// parameter-budget fraction that is mapped through `fraction_to_depth`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiEntry {
    pub depth: Option<usize>,
    pub fraction: Option<f64>,
    pub prob: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    /// Capability groups expanded in order into device ids `0..J`.
    pub devices: Vec<DeviceGroup>,
    pub rounds: usize,
    pub local_epochs: usize,
    #[serde(default)]
    pub devices_per_round: Option<usize>,
    #[serde(default = "default_aggregation")]
    pub aggregation: AggregationMode,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
}

fn default_aggregation() -> AggregationMode {
    AggregationMode::PerLayer
}

fn default_weighting() -> Weighting {
    Weighting::Uniform
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceGroup {
    pub capacity: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<ReportFormat>,
    pub run_id: Option<String>,
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv]
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("config schema violation: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks that need no data or network.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.input_dim == 0 || m.hidden_dim == 0 || m.num_classes == 0 || m.num_blocks == 0 {
            return Err(Error::InvalidConfig("model dimensions must all be >= 1".into()));
        }
        match self.data.generator.as_str() {
            "spiral" | "blobs" | "idx" | "csv" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown data generator '{other}' (expected spiral, blobs, idx, or csv)"
                )))
            }
        }
        if self.train.pi.is_empty() {
            return Err(Error::InvalidConfig("train.pi must be non-empty".into()));
        }
        for entry in &self.train.pi {
            match (entry.depth, entry.fraction) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(Error::InvalidConfig(
                        "each pi entry needs exactly one of depth or fraction".into(),
                    ))
                }
                _ => {}
            }
        }
        if let Some(fed) = &self.federation {
            if fed.devices.is_empty() || fed.devices.iter().all(|g| g.count == 0) {
                return Err(Error::InvalidConfig("federation.devices must name at least one device".into()));
            }
            if fed.local_epochs == 0 {
                return Err(Error::InvalidConfig("federation.local_epochs must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.model.input_dim,
            hidden_dim: self.model.hidden_dim,
            num_classes: self.model.num_classes,
            num_blocks: self.model.num_blocks,
        }
    }

    pub fn build_net(&self) -> Result<ResidualNet> {
        self.model_spec().build(derive_seed(self.seed, streams::NET_INIT))
    }

    /// `(train, test)` datasets per the data section.
    pub fn build_datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let need = |field: &str, v: Option<usize>| {
            v.ok_or_else(|| Error::InvalidConfig(format!("data.{field} required for {}", d.generator)))
        };
        match d.generator.as_str() {
            "spiral" => {
                let n = need("n_per_class", d.n_per_class)?;
                let classes = d.num_classes.unwrap_or(self.model.num_classes);
                let noise = d.noise_std.unwrap_or(0.0);
                let test_n = d.test_n_per_class.unwrap_or(n);
                let train = gen_spiral(n, classes, noise, derive_seed(self.seed, streams::DATA_TRAIN))?;
                let test = gen_spiral(test_n, classes, noise, derive_seed(self.seed, streams::DATA_TEST))?;
                Ok((train.with_split(SplitTag::Train), test.with_split(SplitTag::Test)))
            }
            "blobs" => {
                let n = need("n_per_class", d.n_per_class)?;
                let classes = d.num_classes.unwrap_or(self.model.num_classes);
                let dim = d.dim.unwrap_or(self.model.input_dim);
                let sep = d.separation.unwrap_or(6.0);
                let test_n = d.test_n_per_class.unwrap_or(n);
                let train = gen_blobs(n, classes, dim, sep, derive_seed(self.seed, streams::DATA_TRAIN))?;
                let test = gen_blobs(test_n, classes, dim, sep, derive_seed(self.seed, streams::DATA_TEST))?;
                Ok((train.with_split(SplitTag::Train), test.with_split(SplitTag::Test)))
            }
            "idx" => {
                let path = |name: &str, p: &Option<PathBuf>| {
                    p.clone().ok_or_else(|| {
                        Error::InvalidConfig(format!("data.{name} required for idx"))
                    })
                };
                let train = load_idx(
                    &path("train_images", &d.train_images)?,
                    &path("train_labels", &d.train_labels)?,
                )?;
                let test = load_idx(
                    &path("test_images", &d.test_images)?,
                    &path("test_labels", &d.test_labels)?,
                )?;
                Ok((train.with_split(SplitTag::Train), test.with_split(SplitTag::Test)))
            }
            "csv" => {
                let train_path = d.train_csv.clone().ok_or_else(|| {
                    Error::InvalidConfig("data.train_csv required for csv".into())
                })?;
                let test_path = d.test_csv.clone().ok_or_else(|| {
                    Error::InvalidConfig("data.test_csv required for csv".into())
                })?;
                Ok((
                    load_csv(&train_path)?.with_split(SplitTag::Train),
                    load_csv(&test_path)?.with_split(SplitTag::Test),
                ))
            }
            other => Err(Error::InvalidConfig(format!("unknown data generator '{other}'"))),
        }
    }

    /// Resolve π entries (depths or fractions) against a built network.
    pub fn build_pi(&self, net: &ResidualNet) -> Result<ActivationDistribution> {
        let mut probs = vec![0.0; net.num_blocks()];
        for entry in &self.train.pi {
            let depth = match (entry.depth, entry.fraction) {
                (Some(k), None) => {
                    if k == 0 || k > net.num_blocks() {
                        return Err(Error::DepthOutOfRange { depth: k, max: net.num_blocks() });
                    }
                    k
                }
                (None, Some(f)) => fraction_to_depth(net, f)?.depth,
                _ => unreachable!("validated in RunConfig::validate"),
            };
            probs[depth - 1] += entry.prob;
        }
        ActivationDistribution::new(probs)
    }

    pub fn build_train_config(&self, net: &ResidualNet) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            beta: t.beta,
            distill_mode: t.distill_mode,
            pi: self.build_pi(net)?,
            seed: derive_seed(self.seed, streams::TRAIN),
            eval_depths: t.eval_depths.clone().unwrap_or_default(),
            sample_per_epoch: t.sample_per_epoch,
            lr_decay_every: t.lr_decay_every,
            lr_decay_factor: t.lr_decay_factor,
        };
        cfg.validate(net.num_blocks())?;
        Ok(cfg)
    }

    /// Partition the training set and expand device groups into profiles.
    pub fn build_devices(&self, net: &ResidualNet, train: &Dataset) -> Result<Vec<DeviceProfile>> {
        let fed = self.federation_section()?;
        let capacities: Vec<f64> = fed
            .devices
            .iter()
            .flat_map(|g| std::iter::repeat(g.capacity).take(g.count))
            .collect();
        let plan = self.build_partition(train, capacities.len())?;
        let mut profiles = Vec::with_capacity(capacities.len());
        for (id, &capacity) in capacities.iter().enumerate() {
            let shard = train.subset(&plan.device_indices[id], format!("device{id}"))?;
            profiles.push(DeviceProfile::from_capacity(
                id,
                capacity,
                net,
                shard,
                derive_seed(self.seed, streams::DEVICE_BASE + id as u64),
            )?);
        }
        Ok(profiles)
    }

    pub fn build_partition(&self, train: &Dataset, num_devices: usize) -> Result<PartitionPlan> {
        let seed = derive_seed(self.seed, streams::PARTITION);
        match &self.data.partition {
            None => partition_iid(train, num_devices, seed),
            Some(p) => match p.method.as_str() {
                "iid" => partition_iid(train, num_devices, seed),
                "dirichlet" => {
                    let alpha = p.alpha.ok_or_else(|| {
                        Error::InvalidConfig("partition.alpha required for dirichlet".into())
                    })?;
                    partition_dirichlet(train, num_devices, alpha, seed)
                }
                other => Err(Error::InvalidConfig(format!(
                    "unknown partition method '{other}' (expected iid or dirichlet)"
                ))),
            },
        }
    }

    pub fn build_federation_config(&self, net: &ResidualNet) -> Result<FederationConfig> {
        let fed = self.federation_section()?;
        let train = self.build_train_config(net)?;
        Ok(FederationConfig {
            rounds: fed.rounds,
            local_epochs: fed.local_epochs,
            devices_per_round: fed.devices_per_round,
            aggregation: fed.aggregation,
            weighting: fed.weighting,
            train,
            seed: derive_seed(self.seed, streams::FED_SERVER),
        })
    }

    pub fn federation_section(&self) -> Result<&FederationSection> {
        self.federation
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("config has no federation section".into()))
    }
}
