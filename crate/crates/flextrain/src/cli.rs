//! Command-line entry point: one experiment per invocation, everything driven
//! by a JSON config plus a few overrides.
//!
//! Exit codes: 0 success, 1 configuration/usage error, 2 runtime or
//! divergence error.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::Error;
use crate::fed::{run_fedclass, run_federated, run_fedsmall, RoundReport};
use crate::report::{
    curve_accuracy_vs_fraction, expected_cost_ratio, expected_training_cost, flop_count_prefix,
    write_report, ReportFormat, RunRecord,
};
use crate::sampler::{expected_param_ratio, ActivationDistribution};
use crate::trainer::{evaluate_prefix, train_independents, EpochLog, TrainSession};

#[derive(Parser)]
#[command(name = "flextrain", version, about = "Depth-flexible training engine and federated simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Depth-sampled flexible training with auto-distillation
    Train(RunArgs),
    /// Single full-depth model baseline
    Single(RunArgs),
    /// Independently trained model per depth in the support of pi
    Independents(RunArgs),
    /// Federated flexible training over heterogeneous devices
    Fedtrain(RunArgs),
    /// FedAvg at the deepest prefix the weakest device can hold
    Fedsmall(RunArgs),
    /// One FedAvg run per device capability class
    Fedclass(RunArgs),
    /// Cost accounting: expected parameter and FLOP ratios, no training
    Flops(RunArgs),
    /// Evaluate a checkpoint at the configured depths
    Eval(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of federated rounds
    #[arg(long)]
    rounds: Option<usize>,
    /// Override the number of training epochs
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

use Failure::{Config, Runtime};

type CliResult = Result<String, Failure>;

/// Run the CLI on raw argv (including the program name); returns the exit
/// code without exiting.
pub fn run_cli(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Train(args) => cmd_centralized(args, Mode::Flex),
        Command::Single(args) => cmd_centralized(args, Mode::Single),
        Command::Independents(args) => cmd_independents(args),
        Command::Fedtrain(args) => cmd_federated(args, FedKind::FlexTrain),
        Command::Fedsmall(args) => cmd_federated(args, FedKind::Small),
        Command::Fedclass(args) => cmd_fedclass(args),
        Command::Flops(args) => cmd_flops(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(Config(e)) => {
            eprintln!("config error: {e}");
            1
        }
        Err(Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

struct Prepared {
    cfg: RunConfig,
    out_dir: PathBuf,
    run_id: String,
    formats: Vec<ReportFormat>,
}

fn prepare(args: &RunArgs, default_run_id: &str) -> Result<Prepared, Failure> {
    let mut cfg = RunConfig::load(&args.config).map_err(Config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(rounds) = args.rounds {
        if let Some(fed) = cfg.federation.as_mut() {
            fed.rounds = rounds;
        }
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os("FLEXTRAIN_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir).map_err(|e| {
        Config(Error::InvalidConfig(format!(
            "cannot create output dir {}: {e}",
            out_dir.display()
        )))
    })?;
    let run_id = cfg
        .output
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{default_run_id}_seed{}", cfg.seed));
    let formats = cfg.output.formats.clone();
    Ok(Prepared { cfg, out_dir, run_id, formats })
}

fn write_reports(
    records: &[RunRecord],
    prepared: &Prepared,
    suffix: &str,
) -> Result<Vec<PathBuf>, Failure> {
    let mut paths = Vec::new();
    for format in &prepared.formats {
        let path = prepared
            .out_dir
            .join(format!("{}_{suffix}.{}", prepared.run_id, format.extension()));
        write_report(records, &path, *format).map_err(Runtime)?;
        paths.push(path);
    }
    Ok(paths)
}

fn paths_summary(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

fn epoch_records(run_id: &str, stage: &str, logs: &[EpochLog]) -> Vec<RunRecord> {
    let mut records = Vec::new();
    for log in logs {
        let epoch = log.epoch as u64;
        let base = |metric: &str, value: f64| RunRecord {
            run_id: run_id.into(),
            stage: stage.into(),
            round_or_epoch: epoch,
            depth_k: None,
            split: "train".into(),
            metric: metric.into(),
            value,
        };
        records.push(base("loss_total", log.mean_total_loss));
        records.push(base("loss_base", log.mean_base_loss));
        records.push(base("loss_distill", log.mean_distill_loss));
        records.push(base("flops_cumulative", log.cumulative_flops as f64));
        for (depth, count) in log.depth_histogram.iter().enumerate() {
            if *count > 0 {
                records.push(RunRecord {
                    run_id: run_id.into(),
                    stage: stage.into(),
                    round_or_epoch: epoch,
                    depth_k: Some(depth as u32 + 1),
                    split: "train".into(),
                    metric: "depth_steps".into(),
                    value: *count as f64,
                });
            }
        }
        for &(depth, acc) in &log.eval_accuracy {
            records.push(RunRecord {
                run_id: run_id.into(),
                stage: stage.into(),
                round_or_epoch: epoch,
                depth_k: Some(depth as u32),
                split: "test".into(),
                metric: "accuracy".into(),
                value: acc,
            });
        }
    }
    records
}

fn round_records(run_id: &str, stage: &str, reports: &[RoundReport]) -> Vec<RunRecord> {
    let mut records = Vec::new();
    for report in reports {
        let round = report.round as u64;
        for &(device, loss) in &report.local_loss {
            records.push(RunRecord {
                run_id: run_id.into(),
                stage: stage.into(),
                round_or_epoch: round,
                depth_k: None,
                split: "train".into(),
                metric: format!("local_loss.dev{device}"),
                value: loss,
            });
        }
        for &(depth, acc) in &report.depth_accuracy {
            records.push(RunRecord {
                run_id: run_id.into(),
                stage: stage.into(),
                round_or_epoch: round,
                depth_k: Some(depth as u32),
                split: "test".into(),
                metric: "accuracy".into(),
                value: acc,
            });
        }
        records.push(RunRecord {
            run_id: run_id.into(),
            stage: stage.into(),
            round_or_epoch: round,
            depth_k: None,
            split: "test".into(),
            metric: "mean_device_accuracy".into(),
            value: report.mean_device_accuracy,
        });
        records.push(RunRecord {
            run_id: run_id.into(),
            stage: stage.into(),
            round_or_epoch: round,
            depth_k: None,
            split: "wire".into(),
            metric: "bytes_shipped".into(),
            value: report.bytes_shipped as f64,
        });
    }
    records
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Flex,
    Single,
}

fn cmd_centralized(args: &RunArgs, mode: Mode) -> CliResult {
    let stage = match mode {
        Mode::Flex => "train",
        Mode::Single => "single",
    };
    let prepared = prepare(args, stage)?;
    let cfg = &prepared.cfg;
    let (train, test) = cfg.build_datasets().map_err(Config)?;
    let mut net = cfg.build_net().map_err(Config)?;
    let tc = cfg.build_train_config(&net).map_err(Config)?;
    let eval_depths = if tc.eval_depths.is_empty() { tc.pi.support() } else { tc.eval_depths.clone() };

    let mut session = match mode {
        Mode::Flex => TrainSession::flextrain(&mut net, &train, Some(&test), &tc),
        Mode::Single => TrainSession::single(&mut net, &train, Some(&test), &tc),
    }
    .map_err(Config)?;
    let mut logs = Vec::new();
    let mut completed = 0usize;
    while session.epochs_remaining() > 0 {
        logs.push(session.run_epoch().map_err(Runtime)?);
        completed += 1;
        if let Some(every) = cfg.train.checkpoint_every {
            if every > 0 && completed % every == 0 && session.epochs_remaining() > 0 {
                let path = prepared
                    .out_dir
                    .join(format!("{}_epoch{completed}.ckpt", prepared.run_id));
                checkpoint::save(session.net(), &path).map_err(Runtime)?;
            }
        }
    }
    drop(session);

    let ckpt = prepared.out_dir.join(format!("{}_final.ckpt", prepared.run_id));
    checkpoint::save(&net, &ckpt).map_err(Runtime)?;

    let mut records = epoch_records(&prepared.run_id, stage, &logs);
    // the curve is sorted by parameter fraction, which increases with depth
    let mut sorted_depths = eval_depths.clone();
    sorted_depths.sort_unstable();
    let curve = curve_accuracy_vs_fraction(&net, &test, &sorted_depths).map_err(Runtime)?;
    for (&depth, &(fraction, acc)) in sorted_depths.iter().zip(curve.iter()) {
        records.push(RunRecord {
            run_id: prepared.run_id.clone(),
            stage: stage.into(),
            round_or_epoch: logs.len() as u64,
            depth_k: Some(depth as u32),
            split: "test".into(),
            metric: "final_accuracy".into(),
            value: acc,
        });
        records.push(RunRecord {
            run_id: prepared.run_id.clone(),
            stage: stage.into(),
            round_or_epoch: logs.len() as u64,
            depth_k: Some(depth as u32),
            split: "test".into(),
            metric: "param_fraction".into(),
            value: fraction,
        });
    }
    let paths = write_reports(&records, &prepared, "epochs")?;

    let deepest = *eval_depths.iter().max().expect("non-empty eval depths");
    let final_acc = evaluate_prefix(&net, &test, deepest).map_err(Runtime)?;
    Ok(format!(
        "{stage}: accuracy@k={deepest} {final_acc:.4} | checkpoint {} | reports {}",
        ckpt.display(),
        paths_summary(&paths)
    ))
}

fn cmd_independents(args: &RunArgs) -> CliResult {
    let prepared = prepare(args, "independents")?;
    let cfg = &prepared.cfg;
    let (train, test) = cfg.build_datasets().map_err(Config)?;
    let net = cfg.build_net().map_err(Config)?;
    let tc = cfg.build_train_config(&net).map_err(Config)?;
    let depths = tc.pi.support();

    let outcome =
        train_independents(&cfg.model_spec(), &train, Some(&test), &tc, &depths).map_err(Runtime)?;

    let mut records = Vec::new();
    let mut final_accs = Vec::new();
    for run in &outcome.runs {
        let stage = format!("independent_k{}", run.depth);
        records.extend(epoch_records(&prepared.run_id, &stage, &run.logs));
        let acc = evaluate_prefix(&run.net, &test, run.depth).map_err(Runtime)?;
        final_accs.push((run.depth, acc));
        records.push(RunRecord {
            run_id: prepared.run_id.clone(),
            stage: stage.clone(),
            round_or_epoch: run.logs.len() as u64,
            depth_k: Some(run.depth as u32),
            split: "test".into(),
            metric: "final_accuracy".into(),
            value: acc,
        });
        let ckpt = prepared
            .out_dir
            .join(format!("{}_k{}.ckpt", prepared.run_id, run.depth));
        checkpoint::save(&run.net, &ckpt).map_err(Runtime)?;
    }
    records.push(RunRecord {
        run_id: prepared.run_id.clone(),
        stage: "independents".into(),
        round_or_epoch: 0,
        depth_k: None,
        split: "train".into(),
        metric: "flops_total".into(),
        value: outcome.total_flops as f64,
    });
    let paths = write_reports(&records, &prepared, "epochs")?;
    let accs = final_accs
        .iter()
        .map(|(k, a)| format!("k={k}:{a:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(format!("independents: {accs} | reports {}", paths_summary(&paths)))
}

#[derive(Clone, Copy, PartialEq)]
enum FedKind {
    FlexTrain,
    Small,
}

fn cmd_federated(args: &RunArgs, kind: FedKind) -> CliResult {
    let stage = match kind {
        FedKind::FlexTrain => "fedtrain",
        FedKind::Small => "fedsmall",
    };
    let prepared = prepare(args, stage)?;
    let cfg = &prepared.cfg;
    let (train, test) = cfg.build_datasets().map_err(Config)?;
    let net = cfg.build_net().map_err(Config)?;
    let devices = cfg.build_devices(&net, &train).map_err(Config)?;
    let fcfg = cfg.build_federation_config(&net).map_err(Config)?;

    let outcome = match kind {
        FedKind::FlexTrain => run_federated(net, &devices, &fcfg, &test),
        FedKind::Small => run_fedsmall(net, &devices, &fcfg, &test),
    }
    .map_err(Runtime)?;

    let records = round_records(&prepared.run_id, stage, &outcome.reports);
    let paths = write_reports(&records, &prepared, "rounds")?;
    let ckpt = prepared.out_dir.join(format!("{}_server.ckpt", prepared.run_id));
    checkpoint::save(&outcome.server, &ckpt).map_err(Runtime)?;
    let final_acc = outcome
        .reports
        .last()
        .map(|r| r.mean_device_accuracy)
        .unwrap_or(f64::NAN);
    Ok(format!(
        "{stage}: mean device accuracy {final_acc:.4} | checkpoint {} | reports {}",
        ckpt.display(),
        paths_summary(&paths)
    ))
}

fn cmd_fedclass(args: &RunArgs) -> CliResult {
    let prepared = prepare(args, "fedclass")?;
    let cfg = &prepared.cfg;
    let (train, test) = cfg.build_datasets().map_err(Config)?;
    let net = cfg.build_net().map_err(Config)?;
    let devices = cfg.build_devices(&net, &train).map_err(Config)?;
    let fcfg = cfg.build_federation_config(&net).map_err(Config)?;

    let outcome = run_fedclass(&net, &devices, &fcfg, &test).map_err(Runtime)?;

    let mut records = Vec::new();
    let mut ckpts = Vec::new();
    for class in &outcome.classes {
        let stage = format!("fedclass_k{}", class.depth);
        records.extend(round_records(&prepared.run_id, &stage, &class.reports));
        let ckpt = prepared
            .out_dir
            .join(format!("{}_k{}_server.ckpt", prepared.run_id, class.depth));
        checkpoint::save(&class.server, &ckpt).map_err(Runtime)?;
        ckpts.push(ckpt.display().to_string());
    }
    for (round, &acc) in outcome.combined_mean_accuracy.iter().enumerate() {
        records.push(RunRecord {
            run_id: prepared.run_id.clone(),
            stage: "fedclass".into(),
            round_or_epoch: round as u64,
            depth_k: None,
            split: "test".into(),
            metric: "mean_device_accuracy".into(),
            value: acc,
        });
    }
    let paths = write_reports(&records, &prepared, "rounds")?;
    Ok(format!(
        "fedclass: mean device accuracy {:.4} | checkpoints {} | reports {}",
        outcome.final_mean_device_accuracy,
        ckpts.join(", "),
        paths_summary(&paths)
    ))
}

fn cmd_flops(args: &RunArgs) -> CliResult {
    let prepared = prepare(args, "flops")?;
    let cfg = &prepared.cfg;
    let net = cfg.build_net().map_err(Config)?;
    let pi = cfg.build_pi(&net).map_err(Config)?;

    let r_bar = expected_param_ratio(&pi, &net).map_err(Runtime)?;
    let cost = expected_training_cost(&pi, &net, 1, cfg.train.batch_size).map_err(Runtime)?;
    // independent-models comparison over the deployable depths
    let support = pi.support();
    let support_probs: Vec<f64> = support.iter().map(|&k| pi.probs()[k - 1]).collect();
    let support_costs: Vec<f64> = support
        .iter()
        .map(|&k| flop_count_prefix(&net, k, 1, true).map(|v| v as f64))
        .collect::<crate::error::Result<_>>()
        .map_err(Runtime)?;
    let support_pi = ActivationDistribution::new(support_probs).map_err(Runtime)?;
    let ratios = expected_cost_ratio(&support_pi, &support_costs).map_err(Runtime)?;

    let mut records = Vec::new();
    let mut push = |metric: &str, value: f64| {
        records.push(RunRecord {
            run_id: prepared.run_id.clone(),
            stage: "flops".into(),
            round_or_epoch: 0,
            depth_k: None,
            split: "model".into(),
            metric: metric.into(),
            value,
        });
    };
    push("expected_param_ratio", r_bar);
    push("flop_ratio_vs_full", cost.ratio_vs_full);
    push("flop_ratio_vs_independent", ratios.ratio_vs_independent);
    let paths = write_reports(&records, &prepared, "flops")?;
    Ok(format!(
        "flops: r_bar {r_bar:.4} | flop ratio vs full {:.4} | vs independent {:.4} | reports {}",
        cost.ratio_vs_full,
        ratios.ratio_vs_independent,
        paths_summary(&paths)
    ))
}

fn cmd_eval(args: &EvalArgs) -> CliResult {
    let prepared = prepare(&args.run, "eval")?;
    let cfg = &prepared.cfg;
    let net = checkpoint::load(&args.checkpoint).map_err(Config)?;
    let (_, test) = cfg.build_datasets().map_err(Config)?;
    let depths: Vec<usize> = match &cfg.train.eval_depths {
        Some(d) if !d.is_empty() => d.clone(),
        _ => cfg.build_pi(&net).map_err(Config)?.support(),
    };
    let mut records = Vec::new();
    let mut parts = Vec::new();
    for &k in &depths {
        let acc = evaluate_prefix(&net, &test, k).map_err(Runtime)?;
        parts.push(format!("k={k}:{acc:.4}"));
        records.push(RunRecord {
            run_id: prepared.run_id.clone(),
            stage: "eval".into(),
            round_or_epoch: 0,
            depth_k: Some(k as u32),
            split: "test".into(),
            metric: "accuracy".into(),
            value: acc,
        });
    }
    let paths = write_reports(&records, &prepared, "eval")?;
    Ok(format!("eval: {} | reports {}", parts.join(" "), paths_summary(&paths)))
}

/// Convenience used by tests: run the CLI from string slices.
pub fn run_cli_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    run_cli(&args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_exits_one() {
        assert_eq!(run_cli_from(["flextrain", "frobnicate"]), 1);
    }

    #[test]
    fn missing_config_flag_exits_one() {
        assert_eq!(run_cli_from(["flextrain", "train"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run_cli_from(["flextrain", "--help"]), 0);
    }

    #[test]
    fn missing_config_file_exits_one() {
        assert_eq!(
            run_cli_from(["flextrain", "train", "--config", "/nonexistent/path.json"]),
            1
        );
    }
}
