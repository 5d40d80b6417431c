//! Centralized training loops: depth-sampled flexible training, the
//! single-model and independent-models baselines, and prefix evaluation.
//!
//! One seeded stream drives all randomness of a run. Per optimizer step the
//! draw order is: prefix depth first, then the batch indices (uniform with
//! replacement). One epoch is `ceil(n / batch_size)` steps. Two runs with the
//! same seed and configuration are bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{step_loss, DistillMode};
use crate::nn::{sgd_step, ModelSpec, ResidualNet, Velocity};
use crate::report::CostModel;
use crate::sampler::{sample_config, ActivationDistribution};

/// Hyper-parameters of one centralized training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub distill_mode: DistillMode,
    pub pi: ActivationDistribution,
    pub seed: u64,
    /// Depths evaluated after each epoch; empty means the support of π.
    pub eval_depths: Vec<usize>,
    /// Sample one depth per epoch instead of per step.
    pub sample_per_epoch: bool,
    /// Step decay: multiply the rate by `lr_decay_factor` every
    /// `lr_decay_every` epochs. `None` keeps the rate constant.
    pub lr_decay_every: Option<usize>,
    pub lr_decay_factor: f64,
}

impl TrainConfig {
    /// Learning rate in effect for a given (zero-based) epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            Some(every) if every > 0 => self.lr * self.lr_decay_factor.powi((epoch / every) as i32),
            _ => self.lr,
        }
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.lr_decay_factor.is_finite() && 0.0 < self.lr_decay_factor && self.lr_decay_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.pi.num_depths() != num_blocks {
            return Err(Error::InvalidDistribution(format!(
                "pi has {} depths, network has {num_blocks} blocks",
                self.pi.num_depths()
            )));
        }
        for &k in &self.eval_depths {
            if k == 0 || k > num_blocks {
                return Err(Error::DepthOutOfRange { depth: k, max: num_blocks });
            }
        }
        Ok(())
    }

    fn resolved_eval_depths(&self) -> Vec<usize> {
        if self.eval_depths.is_empty() {
            self.pi.support()
        } else {
            self.eval_depths.clone()
        }
    }
}

/// Per-epoch metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// `depth_histogram[k-1]` counts optimizer steps taken at depth `k`;
    /// sums to the number of steps in the epoch.
    pub depth_histogram: Vec<u64>,
    pub mean_total_loss: f64,
    pub mean_base_loss: f64,
    pub mean_distill_loss: f64,
    /// `(depth, accuracy)` pairs on the evaluation set, when one was given.
    pub eval_accuracy: Vec<(usize, f64)>,
    pub cumulative_flops: u64,
}

/// Batch indices drawn uniformly with replacement; exactly `batch_size`
/// draws. Public so reduction oracles can replay the stream.
pub fn draw_batch_indices<R: Rng>(rng: &mut R, n: usize, batch_size: usize) -> Vec<usize> {
    (0..batch_size).map(|_| rng.random_range(0..n)).collect()
}

/// Loss sums over a span of optimizer steps.
#[derive(Clone, Debug, Default)]
pub struct StepStats {
    pub steps: u64,
    pub depth_histogram: Vec<u64>,
    pub sum_total: f64,
    pub sum_base: f64,
    pub sum_distill: f64,
}

impl StepStats {
    fn new(num_blocks: usize) -> Self {
        Self { depth_histogram: vec![0; num_blocks], ..Default::default() }
    }

    pub fn mean_total(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.sum_total / self.steps as f64
        }
    }
}

/// Run `epochs` epochs of depth-sampled SGD on `net`, advancing the caller's
/// rng, velocity, and FLOP counter in place. Shared by the centralized
/// trainer and the per-device federated updates. `start_epoch` positions the
/// span within the run for the learning-rate schedule.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_epochs(
    net: &mut ResidualNet,
    velocity: &mut Velocity,
    rng: &mut ChaCha8Rng,
    data: &Dataset,
    pi: &ActivationDistribution,
    mode: DistillMode,
    cfg: &TrainConfig,
    start_epoch: usize,
    epochs: usize,
) -> Result<(StepStats, u64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.dim() != net.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "dataset dim {} does not match network input dim {}",
            data.dim(),
            net.input_dim()
        )));
    }
    if data.num_classes() > net.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} classes, network outputs {}",
            data.num_classes(),
            net.num_classes()
        )));
    }
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let cost_model = CostModel::from_net(net);
    let step_cost: Vec<u64> = (1..=net.num_blocks())
        .map(|k| cost_model.prefix_cost(k, cfg.batch_size, true))
        .collect::<Result<_>>()?;

    let mut stats = StepStats::new(net.num_blocks());
    let mut flops: u64 = 0;
    for epoch in start_epoch..start_epoch + epochs {
        let lr = cfg.lr_at(epoch);
        let epoch_depth = if cfg.sample_per_epoch { Some(sample_config(pi, rng)) } else { None };
        for _ in 0..steps_per_epoch {
            let k = epoch_depth.unwrap_or_else(|| sample_config(pi, rng));
            let indices = draw_batch_indices(rng, n, cfg.batch_size);
            let (x, labels) = data.batch(&indices);
            let (loss, grads) = step_loss(net, &x, &labels, k, mode, cfg.beta)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss became {} at depth {k} after {} steps",
                    loss.total, stats.steps
                )));
            }
            sgd_step(net, velocity, &grads, lr, cfg.momentum, cfg.weight_decay)?;
            flops += step_cost[k - 1];
            stats.steps += 1;
            stats.depth_histogram[k - 1] += 1;
            stats.sum_total += loss.total;
            stats.sum_base += loss.base_term;
            stats.sum_distill += loss.distill_term;
        }
    }
    Ok((stats, flops))
}

/// An in-progress training run: the rng stream, momentum state, and FLOP
/// counter persist across `run_epoch` calls, so callers may interleave
/// checkpointing without perturbing the trajectory.
pub struct TrainSession<'a> {
    net: &'a mut ResidualNet,
    train: &'a Dataset,
    eval: Option<&'a Dataset>,
    cfg: TrainConfig,
    mode: DistillMode,
    eval_depths: Vec<usize>,
    rng: ChaCha8Rng,
    velocity: Velocity,
    cumulative_flops: u64,
    epoch: usize,
}

impl<'a> TrainSession<'a> {
    /// Flexible training: per step draw `k ~ π`, compute the configured
    /// distillation loss at depth `k`, and update only that prefix.
    pub fn flextrain(
        net: &'a mut ResidualNet,
        train: &'a Dataset,
        eval: Option<&'a Dataset>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        Self::build(net, train, eval, cfg.clone(), cfg.distill_mode)
    }

    /// Single-model baseline: π forced to a point mass at full depth and
    /// distillation off. Evaluation still reports every requested depth,
    /// i.e. the truncated prefixes of the one trained model.
    pub fn single(
        net: &'a mut ResidualNet,
        train: &'a Dataset,
        eval: Option<&'a Dataset>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let mut cfg = cfg.clone();
        if cfg.eval_depths.is_empty() {
            cfg.eval_depths = cfg.pi.support();
        }
        cfg.pi = ActivationDistribution::one_hot(net.num_blocks(), net.num_blocks())?;
        Self::build(net, train, eval, cfg, DistillMode::Off)
    }

    fn build(
        net: &'a mut ResidualNet,
        train: &'a Dataset,
        eval: Option<&'a Dataset>,
        cfg: TrainConfig,
        mode: DistillMode,
    ) -> Result<Self> {
        cfg.validate(net.num_blocks())?;
        let eval_depths = cfg.resolved_eval_depths();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let velocity = Velocity::zeros(net);
        Ok(Self {
            net,
            train,
            eval,
            cfg,
            mode,
            eval_depths,
            rng,
            velocity,
            cumulative_flops: 0,
            epoch: 0,
        })
    }

    pub fn epochs_remaining(&self) -> usize {
        self.cfg.epochs.saturating_sub(self.epoch)
    }

    pub fn net(&self) -> &ResidualNet {
        self.net
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let (stats, flops) = run_epochs(
            self.net,
            &mut self.velocity,
            &mut self.rng,
            self.train,
            &self.cfg.pi.clone(),
            self.mode,
            &self.cfg,
            self.epoch,
            1,
        )?;
        self.cumulative_flops += flops;
        let steps = stats.steps.max(1) as f64;
        let mut eval_accuracy = Vec::new();
        if let Some(eval_set) = self.eval {
            for &k in &self.eval_depths {
                eval_accuracy.push((k, evaluate_prefix(self.net, eval_set, k)?));
            }
        }
        let log = EpochLog {
            epoch: self.epoch,
            depth_histogram: stats.depth_histogram,
            mean_total_loss: stats.sum_total / steps,
            mean_base_loss: stats.sum_base / steps,
            mean_distill_loss: stats.sum_distill / steps,
            eval_accuracy,
            cumulative_flops: self.cumulative_flops,
        };
        self.epoch += 1;
        Ok(log)
    }

    pub fn run_to_end(&mut self) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::with_capacity(self.epochs_remaining());
        while self.epochs_remaining() > 0 {
            logs.push(self.run_epoch()?);
        }
        Ok(logs)
    }
}

/// Flexible training, whole run. See [`TrainSession::flextrain`].
pub fn train_flextrain(
    net: &mut ResidualNet,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    TrainSession::flextrain(net, train, eval, cfg)?.run_to_end()
}

/// Single-model baseline, whole run. See [`TrainSession::single`].
pub fn train_single(
    net: &mut ResidualNet,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    TrainSession::single(net, train, eval, cfg)?.run_to_end()
}

/// One independently trained model per requested depth.
#[derive(Debug)]
pub struct IndependentRun {
    pub depth: usize,
    pub net: ResidualNet,
    pub logs: Vec<EpochLog>,
}

#[derive(Debug)]
pub struct IndependentOutcome {
    pub runs: Vec<IndependentRun>,
    /// FLOPs summed across all per-depth runs.
    pub total_flops: u64,
}

/// Independent-models baseline: for each depth `k`, train a fresh `k`-block
/// network exactly as `train_single` would, and account the summed cost.
pub fn train_independents(
    spec: &ModelSpec,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    depths: &[usize],
) -> Result<IndependentOutcome> {
    if depths.is_empty() {
        return Err(Error::InvalidConfig("independent depths must be non-empty".into()));
    }
    let mut seen = vec![false; spec.num_blocks + 1];
    for &k in depths {
        if k == 0 || k > spec.num_blocks {
            return Err(Error::DepthOutOfRange { depth: k, max: spec.num_blocks });
        }
        if seen[k] {
            return Err(Error::InvalidConfig(format!("duplicate independent depth {k}")));
        }
        seen[k] = true;
    }
    let mut runs = Vec::with_capacity(depths.len());
    let mut total_flops = 0u64;
    for &k in depths {
        let mut net = spec.with_blocks(k).build(cfg.seed)?;
        let mut run_cfg = cfg.clone();
        run_cfg.pi = ActivationDistribution::one_hot(k, k)?;
        run_cfg.eval_depths = vec![k];
        let logs = train_single(&mut net, train, eval, &run_cfg)?;
        total_flops += logs.last().map_or(0, |l| l.cumulative_flops);
        runs.push(IndependentRun { depth: k, net, logs });
    }
    Ok(IndependentOutcome { runs, total_flops })
}

/// Argmax-of-logits accuracy of the depth-`k` prefix; ties break to the
/// lowest class index. Deterministic.
pub fn evaluate_prefix(net: &ResidualNet, dataset: &Dataset, k: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    const CHUNK: usize = 512;
    let n = dataset.len();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (x, labels) = dataset.batch(&indices);
        let trace = net.forward_prefix(&x, k)?;
        for (b, &label) in labels.iter().enumerate() {
            let row = trace.logits().row(b);
            let mut best = 0;
            for (c, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_spiral, Dataset};
    use crate::losses::base_loss;
    use crate::nn::init_net;
    use crate::report::flop_count_prefix;

    fn small_cfg(pi: ActivationDistribution, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.001,
            batch_size: 16,
            epochs: 3,
            beta: 0.0,
            distill_mode: DistillMode::Off,
            pi,
            seed,
            eval_depths: Vec::new(),
            sample_per_epoch: false,
            lr_decay_every: None,
            lr_decay_factor: 1.0,
        }
    }

    #[test]
    fn flextrain_with_point_mass_equals_manual_sgd() {
        // The reduction oracle replays the documented draw order with the
        // public single-step operations.
        let data = gen_spiral(40, 3, 0.1, 5).unwrap();
        let pi = ActivationDistribution::one_hot(3, 3).unwrap();
        let cfg = small_cfg(pi.clone(), 77);

        let mut trained = init_net(2, 8, 3, 3, 9).unwrap();
        train_flextrain(&mut trained, &data, None, &cfg).unwrap();

        let mut manual = init_net(2, 8, 3, 3, 9).unwrap();
        let mut velocity = Velocity::zeros(&manual);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
        for _ in 0..cfg.epochs {
            for _ in 0..steps_per_epoch {
                let k = sample_config(&pi, &mut rng);
                assert_eq!(k, 3);
                let idx = draw_batch_indices(&mut rng, data.len(), cfg.batch_size);
                let (x, labels) = data.batch(&idx);
                let trace = manual.forward_prefix(&x, k).unwrap();
                let (_, d_logits) = base_loss(trace.logits(), &labels).unwrap();
                let grads = manual.backward_prefix(&trace, &d_logits, k).unwrap();
                sgd_step(&mut manual, &mut velocity, &grads, cfg.lr, cfg.momentum, cfg.weight_decay)
                    .unwrap();
            }
        }
        assert!(trained.weights_equal(&manual));
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let data = gen_spiral(20, 3, 0.1, 5).unwrap();
        let pi = ActivationDistribution::new(vec![0.5, 0.5]).unwrap();
        let mut cfg = small_cfg(pi, 3);
        cfg.epochs = 0;
        let mut net = init_net(2, 4, 3, 2, 1).unwrap();
        let before = net.clone();
        let logs = train_flextrain(&mut net, &data, None, &cfg).unwrap();
        assert!(logs.is_empty());
        assert!(net.weights_equal(&before));
    }

    #[test]
    fn single_is_flextrain_with_full_depth_point_mass() {
        let data = gen_spiral(30, 3, 0.1, 6).unwrap();
        let cfg = small_cfg(ActivationDistribution::new(vec![0.5, 0.0, 0.5]).unwrap(), 11);

        let mut a = init_net(2, 6, 3, 3, 4).unwrap();
        train_single(&mut a, &data, None, &cfg).unwrap();

        let mut b = init_net(2, 6, 3, 3, 4).unwrap();
        let mut cfg_b = cfg.clone();
        cfg_b.pi = ActivationDistribution::one_hot(3, 3).unwrap();
        cfg_b.beta = 0.0;
        cfg_b.distill_mode = DistillMode::Off;
        train_flextrain(&mut b, &data, None, &cfg_b).unwrap();
        assert!(a.weights_equal(&b));
    }

    #[test]
    fn single_reports_one_series_per_eval_depth() {
        let data = gen_spiral(20, 3, 0.1, 6).unwrap();
        let mut cfg = small_cfg(ActivationDistribution::one_hot(3, 3).unwrap(), 2);
        cfg.eval_depths = vec![3];
        cfg.epochs = 2;
        let mut net = init_net(2, 4, 3, 3, 4).unwrap();
        let logs = train_single(&mut net, &data, Some(&data), &cfg).unwrap();
        for log in &logs {
            assert_eq!(log.eval_accuracy.len(), 1);
            assert_eq!(log.eval_accuracy[0].0, 3);
        }
    }

    #[test]
    fn independents_with_full_depth_match_single() {
        let data = gen_spiral(25, 3, 0.1, 8).unwrap();
        let cfg = small_cfg(ActivationDistribution::one_hot(3, 3).unwrap(), 13);
        let spec = ModelSpec { input_dim: 2, hidden_dim: 6, num_classes: 3, num_blocks: 3 };

        let outcome = train_independents(&spec, &data, None, &cfg, &[3]).unwrap();
        let mut single = spec.build(cfg.seed).unwrap();
        let logs = train_single(&mut single, &data, None, &cfg).unwrap();
        assert!(outcome.runs[0].net.weights_equal(&single));
        assert_eq!(outcome.total_flops, logs.last().unwrap().cumulative_flops);
    }

    #[test]
    fn independents_flops_sum_over_runs() {
        let data = gen_spiral(25, 3, 0.1, 8).unwrap();
        let cfg = small_cfg(ActivationDistribution::one_hot(3, 3).unwrap(), 13);
        let spec = ModelSpec { input_dim: 2, hidden_dim: 6, num_classes: 3, num_blocks: 3 };
        let outcome = train_independents(&spec, &data, None, &cfg, &[1, 2, 3]).unwrap();
        let sum: u64 = outcome
            .runs
            .iter()
            .map(|r| r.logs.last().unwrap().cumulative_flops)
            .sum();
        assert_eq!(outcome.total_flops, sum);
        assert!(train_independents(&spec, &data, None, &cfg, &[1, 1]).is_err());
    }

    #[test]
    fn histogram_counts_steps_and_flops_match_convention() {
        let data = gen_spiral(40, 3, 0.1, 9).unwrap();
        let pi = ActivationDistribution::new(vec![0.25, 0.25, 0.5]).unwrap();
        let mut cfg = small_cfg(pi, 15);
        cfg.epochs = 4;
        let mut net = init_net(2, 6, 3, 3, 5).unwrap();
        let logs = train_flextrain(&mut net, &data, None, &cfg).unwrap();
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
        let mut expected_flops = 0u64;
        for log in &logs {
            assert_eq!(log.depth_histogram.iter().sum::<u64>(), steps_per_epoch);
            for (i, &count) in log.depth_histogram.iter().enumerate() {
                expected_flops +=
                    count * flop_count_prefix(&net, i + 1, cfg.batch_size, true).unwrap();
            }
            assert_eq!(log.cumulative_flops, expected_flops);
        }
    }

    #[test]
    fn per_epoch_sampling_uses_one_depth_per_epoch() {
        let data = gen_spiral(40, 3, 0.1, 9).unwrap();
        let pi = ActivationDistribution::new(vec![0.5, 0.5]).unwrap();
        let mut cfg = small_cfg(pi, 16);
        cfg.sample_per_epoch = true;
        cfg.epochs = 6;
        let mut net = init_net(2, 4, 3, 2, 5).unwrap();
        let logs = train_flextrain(&mut net, &data, None, &cfg).unwrap();
        for log in &logs {
            let nonzero = log.depth_histogram.iter().filter(|&&c| c > 0).count();
            assert_eq!(nonzero, 1);
        }
    }

    #[test]
    fn zero_head_predicts_class_zero_frequency() {
        let data = gen_spiral(30, 3, 0.1, 3).unwrap();
        let mut net = init_net(2, 4, 3, 2, 1).unwrap();
        for v in net.params_mut().head.weight.data_mut() {
            *v = 0.0;
        }
        let acc = evaluate_prefix(&net, &data, 2).unwrap();
        let class0 = data.class_counts()[0] as f64 / data.len() as f64;
        assert_eq!(acc, class0);
    }

    #[test]
    fn perfect_memorizer_scores_one() {
        // one-hot features fed through identity-like layers: logits = input
        let features = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let data = Dataset::new(
            features,
            3,
            vec![0, 1, 2],
            3,
            crate::data::SplitTag::Train,
            "toy".into(),
        )
        .unwrap();
        let mut net = init_net(3, 3, 3, 1, 1).unwrap();
        {
            let p = net.params_mut();
            for v in p.pre.weight.data_mut() {
                *v = 0.0;
            }
            for i in 0..3 {
                p.pre.weight.set(i, i, 1.0);
            }
            for v in p.blocks[0].dense1.weight.data_mut() {
                *v = 0.0;
            }
            for v in p.head.weight.data_mut() {
                *v = 0.0;
            }
            for i in 0..3 {
                p.head.weight.set(i, i, 1.0);
            }
        }
        assert_eq!(evaluate_prefix(&net, &data, 1).unwrap(), 1.0);
    }

    #[test]
    fn untrained_nets_score_near_chance() {
        let data = gen_spiral(100, 3, 0.1, 4).unwrap();
        let mut accs: Vec<f64> = (0..10)
            .map(|seed| {
                let net = init_net(2, 8, 3, 3, seed).unwrap();
                evaluate_prefix(&net, &data, 3).unwrap()
            })
            .collect();
        accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = accs[5];
        assert!((median - 1.0 / 3.0).abs() <= 0.1, "median accuracy {median}");
    }

    #[test]
    fn training_loss_decreases_on_spiral() {
        let data = gen_spiral(100, 3, 0.1, 30).unwrap();
        let pi = ActivationDistribution::new(vec![0.0, 0.25, 0.0, 0.75]).unwrap();
        let mut cfg = small_cfg(pi, 31);
        cfg.epochs = 30;
        cfg.distill_mode = DistillMode::CentralizedNext;
        cfg.beta = 0.2;
        let mut net = init_net(2, 16, 3, 4, 32).unwrap();
        let logs = train_flextrain(&mut net, &data, None, &cfg).unwrap();
        let first = logs.first().unwrap().mean_base_loss;
        let last = logs.last().unwrap().mean_base_loss;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert!(last < (3.0f64).ln());
    }
}
