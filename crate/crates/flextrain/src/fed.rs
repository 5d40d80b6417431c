//! Deterministic federated simulator: heterogeneous devices each train the
//! deepest prefix they can hold, the server aggregates prefixes per round,
//! and the FedSmall / FedClass baselines reuse the same round loop.
//!
//! Determinism contract: devices execute in ascending `device_id` regardless
//! of how the caller ordered them, every cross-device reduction iterates in
//! that order, and each device owns a persistent rng stream and momentum
//! state seeded from its profile. Two runs with the same seeds are
//! bit-identical.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::DistillMode;
use crate::nn::{ParamArrays, ResidualNet, Velocity};
use crate::sampler::{fraction_to_depth, ActivationDistribution};
use crate::trainer::{evaluate_prefix, run_epochs, StepStats, TrainConfig};

/// One simulated client.
#[derive(Clone, Debug)]
pub struct DeviceProfile {
    pub device_id: usize,
    /// Fraction of the full model the device can hold, in (0, 1].
    pub capacity_ratio: f64,
    /// Deepest affordable prefix; `fraction_to_depth(capacity_ratio)`.
    pub depth: usize,
    /// Set when even the shallowest prefix exceeds the stated capacity.
    pub over_budget: bool,
    pub data: Dataset,
    pub seed: u64,
}

impl DeviceProfile {
    pub fn from_capacity(
        device_id: usize,
        capacity_ratio: f64,
        net: &ResidualNet,
        data: Dataset,
        seed: u64,
    ) -> Result<Self> {
        let fit = fraction_to_depth(net, capacity_ratio)?;
        Ok(Self {
            device_id,
            capacity_ratio,
            depth: fit.depth,
            over_budget: fit.over_budget,
            data,
            seed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregationMode {
    /// Average each layer over exactly the devices whose prefix covers it;
    /// uncovered layers keep the server weights.
    #[serde(rename = "per-layer")]
    PerLayer,
    /// Pad every update with the current server weights above its depth,
    /// then average whole models (the literal server update of the
    /// federated algorithm).
    #[serde(rename = "padded-average")]
    PaddedAverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `1/|C|` per sampled device.
    Uniform,
    /// Proportional to the device's local dataset size.
    DatasetSize,
}

/// Round-loop configuration. The embedded [`TrainConfig`] supplies the local
/// optimizer hyper-parameters (`lr`, `momentum`, `weight_decay`,
/// `batch_size`, `beta`); its `pi`, `eval_depths`, `epochs`, and `seed` are
/// ignored here — depth is fixed per device, epochs come from
/// `local_epochs`, and randomness comes from device seeds.
#[derive(Clone, Debug)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    /// Devices sampled per round, uniform without replacement; `None` means
    /// full participation.
    pub devices_per_round: Option<usize>,
    pub aggregation: AggregationMode,
    pub weighting: Weighting,
    pub train: TrainConfig,
    /// Seeds the server-side device-sampling stream.
    pub seed: u64,
}

/// Per-round metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub sampled_devices: Vec<usize>,
    /// `(device_id, mean local training loss over the round)`, ascending id.
    pub local_loss: Vec<(usize, f64)>,
    /// `(depth, accuracy)` on the held-out set after aggregation, for every
    /// depth some device deploys.
    pub depth_accuracy: Vec<(usize, f64)>,
    /// Mean over all devices of the held-out accuracy at their own depth.
    pub mean_device_accuracy: f64,
    /// Bytes of prefix checkpoints shipped server -> devices this round.
    pub bytes_shipped: u64,
}

#[derive(Debug)]
pub struct FederatedOutcome {
    pub server: ResidualNet,
    pub reports: Vec<RoundReport>,
}

/// Persistent per-device simulator state: one rng stream, one momentum
/// buffer, and the local-epoch counter (for the learning-rate schedule) all
/// survive across rounds, so a single full-capability device reproduces
/// centralized training exactly.
#[derive(Debug)]
pub struct DeviceState {
    rng: ChaCha8Rng,
    velocity: Option<Velocity>,
    epochs_done: usize,
}

impl DeviceState {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), velocity: None, epochs_done: 0 }
    }
}

/// Run `local_epochs` epochs of mini-batch SGD on the device's shard,
/// minimizing the federated distillation loss at the device depth (`beta =
/// 0` reduces it to the base loss). The prefix is updated in place.
pub fn local_update(
    device: &DeviceProfile,
    state: &mut DeviceState,
    prefix: &mut ResidualNet,
    local_epochs: usize,
    hyper: &TrainConfig,
    beta: f64,
) -> Result<StepStats> {
    if device.data.is_empty() {
        return Err(Error::EmptyDataset.for_device(device.device_id));
    }
    let depth = prefix.num_blocks();
    let pi = ActivationDistribution::one_hot(depth, depth)?;
    let velocity = match state.velocity.take() {
        Some(v) => v,
        None => Velocity::zeros(prefix),
    };
    let mut velocity = velocity;
    let mut cfg = hyper.clone();
    cfg.beta = beta;
    let result = run_epochs(
        prefix,
        &mut velocity,
        &mut state.rng,
        &device.data,
        &pi,
        DistillMode::Federated,
        &cfg,
        state.epochs_done,
        local_epochs,
    );
    state.velocity = Some(velocity);
    state.epochs_done += local_epochs;
    let (stats, _) = result.map_err(|e| e.for_device(device.device_id))?;
    Ok(stats)
}

/// Weighted update entering aggregation.
pub struct AggregateUpdate<'a> {
    pub depth: usize,
    pub net: &'a ResidualNet,
    pub weight: f64,
}

/// Merge device prefixes into a new full-depth model. Contributions are
/// accumulated in the order given (callers pass ascending device id), so
/// results are bitwise reproducible.
pub fn aggregate(
    server: &ResidualNet,
    updates: &[AggregateUpdate<'_>],
    mode: AggregationMode,
) -> Result<ResidualNet> {
    if updates.is_empty() {
        return Err(Error::InvalidConfig("aggregation needs at least one update".into()));
    }
    for u in updates {
        if u.net.input_dim() != server.input_dim()
            || u.net.hidden_dim() != server.hidden_dim()
            || u.net.num_classes() != server.num_classes()
        {
            return Err(Error::ShapeMismatch("update dims do not match server".into()));
        }
        if u.depth == 0 || u.depth > server.num_blocks() || u.net.num_blocks() != u.depth {
            return Err(Error::ShapeMismatch(format!(
                "update claims depth {} but has {} blocks (server K = {})",
                u.depth,
                u.net.num_blocks(),
                server.num_blocks()
            )));
        }
        if !(u.weight.is_finite() && u.weight > 0.0) {
            return Err(Error::InvalidConfig(format!("aggregation weight {} must be > 0", u.weight)));
        }
    }

    let k = server.num_blocks();
    let mut params = ParamArrays::zeros(
        server.input_dim(),
        server.hidden_dim(),
        server.num_classes(),
        k,
    );

    // pre and head: every update contributes
    let total: f64 = updates.iter().map(|u| u.weight).sum();
    weighted_mean_into(
        &mut params.pre,
        updates.iter().map(|u| (&u.net.params().pre, u.weight)),
        total,
    );
    weighted_mean_into(
        &mut params.head,
        updates.iter().map(|u| (&u.net.params().head, u.weight)),
        total,
    );

    for m in 1..=k {
        match mode {
            AggregationMode::PerLayer => {
                let contributors: Vec<&AggregateUpdate> =
                    updates.iter().filter(|u| u.depth >= m).collect();
                if contributors.is_empty() {
                    params.blocks[m - 1] = server.params().blocks[m - 1].clone();
                } else {
                    let wsum: f64 = contributors.iter().map(|u| u.weight).sum();
                    weighted_block_mean_into(
                        &mut params.blocks[m - 1],
                        contributors.iter().map(|u| (&u.net.params().blocks[m - 1], u.weight)),
                        wsum,
                    );
                }
            }
            AggregationMode::PaddedAverage => {
                weighted_block_mean_into(
                    &mut params.blocks[m - 1],
                    updates.iter().map(|u| {
                        let block = if u.depth >= m {
                            &u.net.params().blocks[m - 1]
                        } else {
                            &server.params().blocks[m - 1]
                        };
                        (block, u.weight)
                    }),
                    total,
                );
            }
        }
    }

    Ok(ResidualNet::from_parts(
        server.input_dim(),
        server.hidden_dim(),
        server.num_classes(),
        params,
        server.seed(),
    ))
}

fn weighted_mean_into<'a>(
    dst: &mut crate::nn::DenseLayer,
    parts: impl Iterator<Item = (&'a crate::nn::DenseLayer, f64)>,
    total: f64,
) {
    for (layer, w) in parts {
        for (d, s) in dst.weight.data_mut().iter_mut().zip(layer.weight.data().iter()) {
            *d += w * s;
        }
        for (d, s) in dst.bias.iter_mut().zip(layer.bias.iter()) {
            *d += w * s;
        }
    }
    for d in dst.weight.data_mut() {
        *d /= total;
    }
    for d in dst.bias.iter_mut() {
        *d /= total;
    }
}

fn weighted_block_mean_into<'a>(
    dst: &mut crate::nn::ResidualBlock,
    parts: impl Iterator<Item = (&'a crate::nn::ResidualBlock, f64)> + Clone,
    total: f64,
) {
    weighted_mean_into(&mut dst.dense1, parts.clone().map(|(b, w)| (&b.dense1, w)), total);
    weighted_mean_into(&mut dst.dense2, parts.map(|(b, w)| (&b.dense2, w)), total);
}

/// Federated flexible training: per round, sample devices, ship each its
/// deepest affordable prefix, run local updates with the federated
/// distillation loss, aggregate, and evaluate.
pub fn run_federated(
    server: ResidualNet,
    devices: &[DeviceProfile],
    fcfg: &FederationConfig,
    eval: &Dataset,
) -> Result<FederatedOutcome> {
    run_rounds(server, devices, fcfg, eval, None, fcfg.train.beta)
}

/// FedSmall baseline: plain FedAvg of the deepest prefix the least capable
/// device can hold; every device trains and is evaluated at that depth.
pub fn run_fedsmall(
    server: ResidualNet,
    devices: &[DeviceProfile],
    fcfg: &FederationConfig,
    eval: &Dataset,
) -> Result<FederatedOutcome> {
    let k_star = devices
        .iter()
        .map(|d| d.depth)
        .min()
        .ok_or_else(|| Error::InvalidConfig("no devices".into()))?;
    run_rounds(server, devices, fcfg, eval, Some(k_star), 0.0)
}

#[derive(Debug)]
pub struct ClassOutcome {
    pub depth: usize,
    pub device_ids: Vec<usize>,
    /// A single-device class degenerates to local training.
    pub solo: bool,
    pub server: ResidualNet,
    pub reports: Vec<RoundReport>,
}

#[derive(Debug)]
pub struct FedClassOutcome {
    pub classes: Vec<ClassOutcome>,
    /// Round-by-round mean device accuracy aggregated across classes.
    pub combined_mean_accuracy: Vec<f64>,
    pub final_mean_device_accuracy: f64,
}

/// FedClass baseline: group devices by affordable depth and run one
/// independent FedAvg per class on that class's devices and data only.
pub fn run_fedclass(
    server: &ResidualNet,
    devices: &[DeviceProfile],
    fcfg: &FederationConfig,
    eval: &Dataset,
) -> Result<FedClassOutcome> {
    if devices.is_empty() {
        return Err(Error::InvalidConfig("no devices".into()));
    }
    let mut depths: Vec<usize> = devices.iter().map(|d| d.depth).collect();
    depths.sort_unstable();
    depths.dedup();

    let total_devices = devices.len();
    let mut classes = Vec::with_capacity(depths.len());
    for &depth in &depths {
        let members: Vec<DeviceProfile> =
            devices.iter().filter(|d| d.depth == depth).cloned().collect();
        let device_ids: Vec<usize> = {
            let mut ids: Vec<usize> = members.iter().map(|d| d.device_id).collect();
            ids.sort_unstable();
            ids
        };
        let solo = members.len() == 1;
        let mut class_cfg = fcfg.clone();
        class_cfg.devices_per_round =
            fcfg.devices_per_round.map(|m| m.min(members.len()));
        let outcome = run_rounds(server.clone(), &members, &class_cfg, eval, Some(depth), 0.0)?;
        classes.push(ClassOutcome {
            depth,
            device_ids,
            solo,
            server: outcome.server,
            reports: outcome.reports,
        });
    }

    let mut combined = Vec::with_capacity(fcfg.rounds);
    for round in 0..fcfg.rounds {
        let mut acc = 0.0;
        for class in &classes {
            acc += class.reports[round].mean_device_accuracy * class.device_ids.len() as f64;
        }
        combined.push(acc / total_devices as f64);
    }
    let final_mean = combined.last().copied().unwrap_or(0.0);
    Ok(FedClassOutcome {
        classes,
        combined_mean_accuracy: combined,
        final_mean_device_accuracy: final_mean,
    })
}

/// Shared round loop. `depth_override` pins every device to one depth
/// (FedSmall / FedClass); `beta` is the local distillation weight.
fn run_rounds(
    mut server: ResidualNet,
    devices: &[DeviceProfile],
    fcfg: &FederationConfig,
    eval: &Dataset,
    depth_override: Option<usize>,
    beta: f64,
) -> Result<FederatedOutcome> {
    if devices.is_empty() {
        return Err(Error::InvalidConfig("no devices".into()));
    }
    // execution order is ascending device_id regardless of caller order
    let mut order: Vec<usize> = (0..devices.len()).collect();
    order.sort_by_key(|&i| devices[i].device_id);
    for pair in order.windows(2) {
        if devices[pair[0]].device_id == devices[pair[1]].device_id {
            return Err(Error::InvalidConfig(format!(
                "duplicate device_id {}",
                devices[pair[0]].device_id
            )));
        }
    }
    let num_devices = devices.len();
    let sample_count = fcfg.devices_per_round.unwrap_or(num_devices);
    if sample_count == 0 || sample_count > num_devices {
        return Err(Error::InvalidConfig(format!(
            "devices_per_round {sample_count} out of range 1..={num_devices}"
        )));
    }
    let depth_of = |i: usize| depth_override.unwrap_or(devices[i].depth);
    for &i in &order {
        let d = depth_of(i);
        if d == 0 || d > server.num_blocks() {
            return Err(Error::DepthOutOfRange { depth: d, max: server.num_blocks() });
        }
        if devices[i].data.dim() != server.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "device {} data dim {} vs server input dim {}",
                devices[i].device_id,
                devices[i].data.dim(),
                server.input_dim()
            )));
        }
    }

    let mut states: Vec<DeviceState> =
        devices.iter().map(|d| DeviceState::new(d.seed)).collect();
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(fcfg.seed);
    let eval_depths: Vec<usize> = {
        let mut ds: Vec<usize> = order.iter().map(|&i| depth_of(i)).collect();
        ds.sort_unstable();
        ds.dedup();
        ds
    };

    let mut reports = Vec::with_capacity(fcfg.rounds);
    for round in 0..fcfg.rounds {
        // sample the round's cohort, then serve it in ascending id order
        let cohort: Vec<usize> = if sample_count == num_devices {
            order.clone()
        } else {
            let mut pool = order.clone();
            pool.shuffle(&mut sampler_rng);
            let mut picked: Vec<usize> = pool.into_iter().take(sample_count).collect();
            picked.sort_by_key(|&i| devices[i].device_id);
            picked
        };

        let mut bytes_shipped = 0u64;
        let mut local_loss = Vec::with_capacity(cohort.len());
        let mut updated: Vec<(usize, ResidualNet, f64)> = Vec::with_capacity(cohort.len());
        for &i in &cohort {
            let device = &devices[i];
            let depth = depth_of(i);
            let mut prefix = server.prefix_clone(depth)?;
            bytes_shipped += checkpoint::byte_size(&prefix);
            let stats = local_update(
                device,
                &mut states[i],
                &mut prefix,
                fcfg.local_epochs,
                &fcfg.train,
                beta,
            )?;
            local_loss.push((device.device_id, stats.mean_total()));
            let weight = match fcfg.weighting {
                Weighting::Uniform => 1.0,
                Weighting::DatasetSize => device.data.len() as f64,
            };
            updated.push((depth, prefix, weight));
        }
        let update_refs: Vec<AggregateUpdate> = updated
            .iter()
            .map(|(depth, net, weight)| AggregateUpdate { depth: *depth, net, weight: *weight })
            .collect();
        server = aggregate(&server, &update_refs, fcfg.aggregation)?;

        let mut depth_accuracy = Vec::with_capacity(eval_depths.len());
        for &d in &eval_depths {
            depth_accuracy.push((d, evaluate_prefix(&server, eval, d)?));
        }
        let acc_of = |d: usize| -> f64 {
            depth_accuracy
                .iter()
                .find(|(depth, _)| *depth == d)
                .map(|(_, a)| *a)
                .expect("every device depth is evaluated")
        };
        let mean_device_accuracy =
            order.iter().map(|&i| acc_of(depth_of(i))).sum::<f64>() / num_devices as f64;

        reports.push(RoundReport {
            round,
            sampled_devices: cohort.iter().map(|&i| devices[i].device_id).collect(),
            local_loss,
            depth_accuracy,
            mean_device_accuracy,
            bytes_shipped,
        });
    }
    Ok(FederatedOutcome { server, reports })
}
