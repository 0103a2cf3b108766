//! Experiment execution: dataset → partition → session → metrics CSV and
//! summary.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, TransportKind};
use super::data::{self, DatasetSplit};
use crate::error::{Error, Result};
use crate::protocol::transport::{InMemoryTransport, LoopbackTransport, Transport};
use crate::protocol::{setup_session, Protocol, RoundMetrics, SessionConfig};

/// CSV column layout, fixed for downstream parsing.
pub const CSV_HEADER: [&str; 8] = [
    "round",
    "epoch",
    "lr",
    "train_loss",
    "mean_test_acc",
    "bytes_up",
    "bytes_down",
    "comm_seconds",
];

/// Aggregate numbers for one protocol run.
#[derive(Debug, Clone)]
pub struct ProtocolSummary {
    pub protocol: Protocol,
    pub rounds: usize,
    pub final_mean_test_accuracy: f64,
    pub final_per_client_accuracy: Vec<f64>,
    /// Whole-session transport totals, setup and mask phases included.
    pub total_bytes_up: u64,
    pub total_bytes_down: u64,
    /// Gradient traffic summed over training rounds only.
    pub round_bytes_up: u64,
    pub round_bytes_down: u64,
    pub mean_round_gradient_bytes: f64,
    pub mean_comm_seconds: f64,
    pub std_comm_seconds: f64,
    pub mean_gather_seconds: f64,
    pub std_gather_seconds: f64,
    pub csv_path: PathBuf,
}

/// Paired-run ratios, salient measured against the dense baseline.
#[derive(Debug, Clone)]
pub struct CompareSummary {
    /// Mean per-round gradient bytes, salient / fedavg. Deterministic.
    pub round_gradient_bytes_ratio: f64,
    /// Mean per-round gather time, fedavg / salient (the wall-clock metric).
    pub gather_speedup: f64,
    /// Mean per-round full-exchange time, fedavg / salient.
    pub comm_speedup: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub primary: ProtocolSummary,
    pub baseline: Option<ProtocolSummary>,
    pub compare: Option<CompareSummary>,
    pub summary_path: PathBuf,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

fn csv_path_for(out: &Path, protocol: Protocol, compare: bool) -> PathBuf {
    if !compare {
        return out.to_path_buf();
    }
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    out.with_file_name(format!("{stem}_{protocol}.{ext}"))
}

fn write_csv_row(writer: &mut csv::Writer<std::fs::File>, m: &RoundMetrics) -> Result<()> {
    let acc = m
        .eval
        .as_ref()
        .map(|e| e.mean_accuracy.to_string())
        .unwrap_or_default();
    writer.write_record([
        m.round.to_string(),
        m.epoch.to_string(),
        m.lr.to_string(),
        m.train_loss.to_string(),
        acc,
        m.bytes_up.to_string(),
        m.bytes_down.to_string(),
        m.comm_seconds.to_string(),
    ])?;
    // keep partial results on disk if the run aborts
    writer.flush()?;
    Ok(())
}

fn run_one(
    cfg: &ExperimentConfig,
    splits: &[DatasetSplit],
    protocol: Protocol,
    csv_path: PathBuf,
) -> Result<ProtocolSummary> {
    let transport: Box<dyn Transport> = match cfg.transport {
        TransportKind::Memory => Box::new(InMemoryTransport::new(cfg.n_clients)),
        TransportKind::Loopback => Box::new(LoopbackTransport::connect(cfg.n_clients)?),
    };
    let session_cfg = SessionConfig {
        arch: cfg.arch.clone(),
        n_clients: cfg.n_clients,
        sparsity: cfg.sparsity,
        saliency_batches: cfg.saliency_batches,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        wire: cfg.wire,
    };
    let client_data = splits.iter().map(|s| s.data.clone()).collect();
    let mut session = setup_session(session_cfg, client_data, transport.as_ref())?;
    if protocol == Protocol::Salient {
        session.mask_phase()?;
    }

    if let Some(dir) = csv_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut writer = csv::Writer::from_path(&csv_path)?;
    writer.write_record(CSV_HEADER)?;
    writer.flush()?;
    let metrics = session.run_training(cfg.epochs, cfg.lr, protocol, |m| {
        write_csv_row(&mut writer, m)
    })?;
    writer.flush()?;

    let final_eval = match metrics.iter().rev().find_map(|m| m.eval.clone()) {
        Some(eval) => eval,
        None => session.evaluate()?,
    };
    let counters = transport.counters();
    let round_bytes_up: u64 = metrics.iter().map(|m| m.bytes_up).sum();
    let round_bytes_down: u64 = metrics.iter().map(|m| m.bytes_down).sum();
    let (mean_comm_seconds, std_comm_seconds) =
        mean_std(metrics.iter().map(|m| m.comm_seconds));
    let (mean_gather_seconds, std_gather_seconds) =
        mean_std(metrics.iter().map(|m| m.gather_seconds));
    let mean_round_gradient_bytes = if metrics.is_empty() {
        0.0
    } else {
        (round_bytes_up + round_bytes_down) as f64 / metrics.len() as f64
    };
    Ok(ProtocolSummary {
        protocol,
        rounds: metrics.len(),
        final_mean_test_accuracy: final_eval.mean_accuracy,
        final_per_client_accuracy: final_eval.per_client_accuracy,
        total_bytes_up: counters.up,
        total_bytes_down: counters.down,
        round_bytes_up,
        round_bytes_down,
        mean_round_gradient_bytes,
        mean_comm_seconds,
        std_comm_seconds,
        mean_gather_seconds,
        std_gather_seconds,
        csv_path,
    })
}

/// Runs the configured experiment: loads and partitions the data, executes
/// the protocol (both protocols on the same splits when comparing), writes
/// one CSV per run plus a summary file, and returns the summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dataset = data::load_or_generate_dataset(&cfg.resolved_data())?;
    if dataset.dims != cfg.arch.input_dim {
        return Err(Error::Config(format!(
            "dataset has {} features, arch expects {}",
            dataset.dims, cfg.arch.input_dim
        )));
    }
    if dataset.classes_seen > cfg.arch.classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, arch outputs {}",
            dataset.classes_seen, cfg.arch.classes
        )));
    }
    let splits = data::partition(&dataset, cfg.n_clients, cfg.seed)?;

    let primary_path = csv_path_for(&cfg.out, cfg.protocol, cfg.compare);
    let primary = run_one(cfg, &splits, cfg.protocol, primary_path)?;
    let (baseline, compare) = if cfg.compare {
        let other = match cfg.protocol {
            Protocol::Salient => Protocol::FedAvg,
            Protocol::FedAvg => Protocol::Salient,
        };
        let baseline = run_one(cfg, &splits, other, csv_path_for(&cfg.out, other, true))?;
        let (salient, fedavg) = match cfg.protocol {
            Protocol::Salient => (&primary, &baseline),
            Protocol::FedAvg => (&baseline, &primary),
        };
        let compare = CompareSummary {
            round_gradient_bytes_ratio: salient.mean_round_gradient_bytes
                / fedavg.mean_round_gradient_bytes,
            gather_speedup: fedavg.mean_gather_seconds / salient.mean_gather_seconds,
            comm_speedup: fedavg.mean_comm_seconds / salient.mean_comm_seconds,
        };
        (Some(baseline), Some(compare))
    } else {
        (None, None)
    };

    let summary_path = cfg.out.with_extension("summary.txt");
    let mut outcome = ExperimentOutcome {
        primary,
        baseline,
        compare,
        summary_path,
    };
    let rendered = render_summary(&outcome, &dataset.provenance);
    let mut f = std::fs::File::create(&outcome.summary_path)?;
    f.write_all(rendered.as_bytes())?;
    outcome.summary_path = outcome.summary_path.canonicalize().unwrap_or(outcome.summary_path);
    Ok(outcome)
}

fn render_one(s: &ProtocolSummary, out: &mut String) {
    use std::fmt::Write as _;
    let _ = writeln!(out, "== {} ==", s.protocol);
    let _ = writeln!(out, "csv = {}", s.csv_path.display());
    let _ = writeln!(out, "rounds = {}", s.rounds);
    let _ = writeln!(out, "final_mean_test_acc = {:.4}", s.final_mean_test_accuracy);
    let accs: Vec<String> = s
        .final_per_client_accuracy
        .iter()
        .map(|a| format!("{a:.4}"))
        .collect();
    let _ = writeln!(out, "final_per_client_test_acc = [{}]", accs.join(", "));
    let _ = writeln!(out, "total_bytes_up = {}", s.total_bytes_up);
    let _ = writeln!(out, "total_bytes_down = {}", s.total_bytes_down);
    let _ = writeln!(out, "round_gradient_bytes_up = {}", s.round_bytes_up);
    let _ = writeln!(out, "round_gradient_bytes_down = {}", s.round_bytes_down);
    let _ = writeln!(
        out,
        "mean_round_gradient_bytes = {:.1}",
        s.mean_round_gradient_bytes
    );
    let _ = writeln!(
        out,
        "comm_seconds_per_round = {:.6} ± {:.6}",
        s.mean_comm_seconds, s.std_comm_seconds
    );
    let _ = writeln!(
        out,
        "gather_seconds_per_round = {:.6} ± {:.6}",
        s.mean_gather_seconds, s.std_gather_seconds
    );
}

/// Human-readable summary block, also written next to the CSV.
pub fn render_summary(outcome: &ExperimentOutcome, provenance: &str) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "data = {provenance}");
    render_one(&outcome.primary, &mut out);
    if let Some(baseline) = &outcome.baseline {
        render_one(baseline, &mut out);
    }
    if let Some(c) = &outcome.compare {
        let _ = writeln!(out, "== comparison ==");
        let _ = writeln!(
            out,
            "round_gradient_bytes_ratio (salient/fedavg) = {:.4}",
            c.round_gradient_bytes_ratio
        );
        let _ = writeln!(
            out,
            "comm_speedup_gather (fedavg/salient) = {:.3}",
            c.gather_speedup
        );
        let _ = writeln!(
            out,
            "comm_speedup_full_exchange (fedavg/salient) = {:.3}",
            c.comm_speedup
        );
    }
    out
}
