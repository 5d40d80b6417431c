//! FLOP cost model, metric record persistence, and accuracy-vs-fraction
//! curve data.
//!
//! FLOP convention: a dense layer `in -> out` costs `2*in*out + out` forward
//! FLOPs per sample (multiply and add counted separately, plus bias adds);
//! the residual add and the ReLU each cost `hidden`; the backward pass is
//! costed at twice the forward pass. Costs are exact integers per sample and
//! scale linearly in batch size.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::ResidualNet;
use crate::sampler::{prefix_param_count, ActivationDistribution};
use crate::trainer::evaluate_prefix;

/// Backward pass costed at `BACKWARD_MULTIPLIER x` the forward pass.
pub const BACKWARD_MULTIPLIER: u64 = 2;

/// Per-layer forward FLOP counts for one network, per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostModel {
    /// `[pre, block 1, .., block K, head]`
    forward_per_layer: Vec<u64>,
    backward_multiplier: u64,
}

fn dense_cost(in_dim: u64, out_dim: u64) -> u64 {
    2 * in_dim * out_dim + out_dim
}

impl CostModel {
    pub fn from_net(net: &ResidualNet) -> Self {
        let d_x = net.input_dim() as u64;
        let h = net.hidden_dim() as u64;
        let c = net.num_classes() as u64;
        let mut forward_per_layer = Vec::with_capacity(net.num_blocks() + 2);
        forward_per_layer.push(dense_cost(d_x, h));
        // branch: dense, relu, dense, then the residual add
        let block = dense_cost(h, h) + h + dense_cost(h, h) + h;
        for _ in 0..net.num_blocks() {
            forward_per_layer.push(block);
        }
        forward_per_layer.push(dense_cost(h, c));
        Self { forward_per_layer, backward_multiplier: BACKWARD_MULTIPLIER }
    }

    pub fn num_blocks(&self) -> usize {
        self.forward_per_layer.len() - 2
    }

    /// Forward FLOPs per sample for the depth-`k` prefix.
    pub fn forward_prefix(&self, k: usize) -> Result<u64> {
        if k == 0 || k > self.num_blocks() {
            return Err(Error::DepthOutOfRange { depth: k, max: self.num_blocks() });
        }
        let pre = self.forward_per_layer[0];
        let blocks: u64 = self.forward_per_layer[1..=k].iter().sum();
        let head = *self.forward_per_layer.last().expect("head entry");
        Ok(pre + blocks + head)
    }

    /// Total FLOPs for a batch; with backward included the total is
    /// `(1 + backward_multiplier) x` forward.
    pub fn prefix_cost(&self, k: usize, batch_size: usize, include_backward: bool) -> Result<u64> {
        let forward = self.forward_prefix(k)?;
        let per_sample = if include_backward {
            forward * (1 + self.backward_multiplier)
        } else {
            forward
        };
        Ok(per_sample * batch_size as u64)
    }
}

/// FLOPs for one pass of the depth-`k` prefix over a batch.
pub fn flop_count_prefix(
    net: &ResidualNet,
    k: usize,
    batch_size: usize,
    include_backward: bool,
) -> Result<u64> {
    CostModel::from_net(net).prefix_cost(k, batch_size, include_backward)
}

/// Expected training cost under π and its ratio against always training the
/// full model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpectedCost {
    pub expected_flops: f64,
    pub full_model_flops: f64,
    pub ratio_vs_full: f64,
}

/// `sum_k pi_k * flop_count_prefix(k) * steps * batch`, plus the ratio
/// against the same schedule with `pi = delta_K`.
pub fn expected_training_cost(
    pi: &ActivationDistribution,
    net: &ResidualNet,
    steps: u64,
    batch_size: usize,
) -> Result<ExpectedCost> {
    if pi.num_depths() != net.num_blocks() {
        return Err(Error::InvalidDistribution(format!(
            "distribution has {} depths, network has {} blocks",
            pi.num_depths(),
            net.num_blocks()
        )));
    }
    let model = CostModel::from_net(net);
    let per_depth: Vec<f64> = (1..=net.num_blocks())
        .map(|k| model.prefix_cost(k, batch_size, true).map(|v| v as f64))
        .collect::<Result<_>>()?;
    let ratios = expected_cost_ratio(pi, &per_depth)?;
    Ok(ExpectedCost {
        expected_flops: ratios.expected_cost * steps as f64,
        full_model_flops: ratios.full_cost * steps as f64,
        ratio_vs_full: ratios.ratio_vs_full,
    })
}

/// Cost ratios over explicit per-depth costs (parameter counts, FLOPs, or
/// abstract fractions — the ratios are scale-free).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostRatios {
    pub expected_cost: f64,
    pub full_cost: f64,
    /// Expected cost of one flexible run over one full-model run.
    pub ratio_vs_full: f64,
    /// Cost of training every depth independently.
    pub independent_cost: f64,
    /// Expected flexible cost over the independent-models cost.
    pub ratio_vs_independent: f64,
}

pub fn expected_cost_ratio(pi: &ActivationDistribution, per_depth_cost: &[f64]) -> Result<CostRatios> {
    if pi.num_depths() != per_depth_cost.len() {
        return Err(Error::InvalidDistribution(format!(
            "distribution has {} depths, got {} costs",
            pi.num_depths(),
            per_depth_cost.len()
        )));
    }
    for (i, &c) in per_depth_cost.iter().enumerate() {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidConfig(format!("cost[{i}] = {c} must be positive")));
        }
    }
    let expected_cost: f64 = pi
        .probs()
        .iter()
        .zip(per_depth_cost.iter())
        .map(|(&p, &c)| p * c)
        .sum();
    let full_cost = *per_depth_cost.last().expect("non-empty");
    let independent_cost: f64 = per_depth_cost.iter().sum();
    Ok(CostRatios {
        expected_cost,
        full_cost,
        ratio_vs_full: expected_cost / full_cost,
        independent_cost,
        ratio_vs_independent: expected_cost / independent_cost,
    })
}

/// One metric row. The CSV header is fixed:
/// `run_id,stage,round_or_epoch,depth_k,split,metric,value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub stage: String,
    pub round_or_epoch: u64,
    pub depth_k: Option<u32>,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

fn sorted(records: &[RunRecord]) -> Vec<RunRecord> {
    let mut out = records.to_vec();
    out.sort_by(|a, b| {
        (&a.run_id, &a.stage, a.round_or_epoch, a.depth_k, &a.split, &a.metric).cmp(&(
            &b.run_id,
            &b.stage,
            b.round_or_epoch,
            b.depth_k,
            &b.split,
            &b.metric,
        ))
    });
    out
}

/// Persist records, sorted, as CSV or a JSON array. Float rendering uses the
/// shortest representation that round-trips f64 exactly.
pub fn write_report(records: &[RunRecord], path: &Path, format: ReportFormat) -> Result<()> {
    let records = sorted(records);
    match format {
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_path(path).map_err(io_like)?;
            for r in &records {
                writer.serialize(r).map_err(io_like)?;
            }
            if records.is_empty() {
                // header-only file for an empty record set
                writer
                    .write_record(["run_id", "stage", "round_or_epoch", "depth_k", "split", "metric", "value"])
                    .map_err(io_like)?;
            }
            writer.flush()?;
        }
        ReportFormat::Json => {
            let file = File::create(path)?;
            let mut writer = BufWriter::new(file);
            serde_json::to_writer_pretty(&mut writer, &records)
                .map_err(|e| Error::Data(e.to_string()))?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
    }
    Ok(())
}

pub fn read_report(path: &Path, format: ReportFormat) -> Result<Vec<RunRecord>> {
    match format {
        ReportFormat::Csv => {
            let mut reader = csv::Reader::from_path(path).map_err(io_like)?;
            let mut out = Vec::new();
            for record in reader.deserialize() {
                out.push(record.map_err(io_like)?);
            }
            Ok(out)
        }
        ReportFormat::Json => {
            let file = File::open(path)?;
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Data(e.to_string()))
        }
    }
}

fn io_like(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

/// `(A_k / A, accuracy at depth k)` pairs sorted by fraction; the data behind
/// accuracy-vs-model-fraction curves.
pub fn curve_accuracy_vs_fraction(
    net: &ResidualNet,
    dataset: &Dataset,
    depths: &[usize],
) -> Result<Vec<(f64, f64)>> {
    if depths.is_empty() {
        return Err(Error::InvalidConfig("depths must be non-empty".into()));
    }
    let total = prefix_param_count(net, net.num_blocks())? as f64;
    let mut out = Vec::with_capacity(depths.len());
    for &k in depths {
        let fraction = prefix_param_count(net, k)? as f64 / total;
        let accuracy = evaluate_prefix(net, dataset, k)?;
        out.push((fraction, accuracy));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite fractions"));
    Ok(out)
}
