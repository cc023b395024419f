//! Subcommand implementations.

use std::path::{Path, PathBuf};

use mimo_core::analysis::{self, DistanceMetric, MetricsReport};
use mimo_core::data::Dataset;
use mimo_core::experiment::{self, ExperimentError, ExperimentSetup, SweepAxis, SweepRow};
use mimo_core::landscape::{self, LandscapeError};
use mimo_core::seed::rng_from_seed;
use mimo_core::training::{self, load_checkpoint, Checkpoint, RngDescriptor, TrajectoryLog};
use mimo_core::{build_network, Architecture, Network};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{csv_bytes, opt, resolve_output_dir, write_atomic, OutputDir};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAJECTORY_FILE: &str = "trajectory.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyzeKind {
    Diversity,
    Invariance,
    Separation,
    Metrics,
    Sparsity,
}

impl AnalyzeKind {
    pub fn name(self) -> &'static str {
        match self {
            AnalyzeKind::Diversity => "diversity",
            AnalyzeKind::Invariance => "invariance",
            AnalyzeKind::Separation => "separation",
            AnalyzeKind::Metrics => "metrics",
            AnalyzeKind::Sparsity => "sparsity",
        }
    }
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: PathBuf,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub verbose: u8,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.override_seed(seed);
            config.validate()?;
        }
        Ok(config)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn metrics_row(scope: &str, index: &str, split: &str, m: &MetricsReport) -> Vec<String> {
    vec![
        scope.into(),
        index.into(),
        split.into(),
        m.examples.to_string(),
        opt(m.accuracy),
        opt(m.nll),
        opt(m.ece),
        opt(m.mse),
    ]
}

const METRICS_HEADER: [&str; 8] = ["scope", "index", "split", "examples", "accuracy", "nll", "ece", "mse"];

#[derive(Serialize)]
struct TrainMetrics {
    train: MetricsReport,
    test: MetricsReport,
    heads: Vec<MetricsReport>,
    final_loss: f64,
}

pub fn train(common: &Common) -> Result<PathBuf, CliError> {
    let config = common.load()?;
    let setup = config.setup();
    let mut out = OutputDir::create(resolve_output_dir(common.output_dir.as_deref(), &config), "train")?;
    let (train_set, test_set) = config.data.load(0)?;
    check_data(&setup.network, &train_set)?;
    let snapshot_set = (config.optimizer.snapshot_every > 0).then(|| test_set.head(config.landscape.max_examples));
    common.log(format!("training {} steps", config.optimizer.steps));
    let net = build_network(&setup.network)?;
    let outcome = training::train(&net, &train_set, &setup.sampling, &setup.optimizer, snapshot_set.as_ref())?;

    let rng = RngDescriptor {
        algorithm: "chacha8".into(),
        seed: setup.sampling.seed,
        word_position: outcome.sampler_position.to_string(),
    };
    let ckpt = Checkpoint::new(outcome.network.clone(), config.optimizer.steps as u64, Some(rng));
    out.write(CHECKPOINT_FILE, &ckpt.to_bytes())?;

    let loss = csv_bytes(
        &["step", "loss"],
        outcome.loss_curve.iter().enumerate().map(|(i, l)| vec![i.to_string(), l.to_string()]),
    )?;
    out.write("loss.csv", &loss)?;
    if !outcome.trajectory.snapshots.is_empty() {
        out.write_json(TRAJECTORY_FILE, &outcome.trajectory)?;
    }

    let report = TrainMetrics {
        train: analysis::metrics(&outcome.network, &train_set)?,
        test: analysis::metrics(&outcome.network, &test_set)?,
        heads: analysis::head_metrics(&outcome.network, &test_set)?,
        final_loss: outcome.loss_curve.last().copied().unwrap_or(f64::NAN),
    };
    out.write_json("metrics.json", &report)?;
    common.log(format!("final loss {}", report.final_loss));
    out.finish(&config, &[setup.network.init_seed, setup.sampling.seed])
}

fn check_data(network: &mimo_core::NetworkConfig, data: &Dataset) -> Result<(), CliError> {
    if data.input_dim() != network.input_dim {
        return Err(CliError::Usage(format!(
            "data has {} features but the network expects {}",
            data.input_dim(),
            network.input_dim
        )));
    }
    if data.task() != network.task {
        return Err(CliError::Usage(format!(
            "data task {:?} does not match network task {:?}",
            data.task(),
            network.task
        )));
    }
    Ok(())
}

fn load_network(path: &Path) -> Result<Network, CliError> {
    Ok(load_checkpoint(path)?.network)
}

fn require_heads(net: &Network, what: &str) -> Result<(), CliError> {
    if net.ensemble_size() < 2 {
        return Err(CliError::Usage(format!(
            "{what} needs at least 2 subnetworks, checkpoint has {}",
            net.ensemble_size()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct InvarianceOutput {
    train: analysis::InvarianceReport,
    test: analysis::InvarianceReport,
}

#[derive(Serialize)]
struct SeparationOutput<'a> {
    slots: usize,
    units: usize,
    dominance_threshold: f64,
    dominant_fraction: f64,
    plan: &'a analysis::FixingPlan,
}

#[derive(Serialize)]
struct MetricsOutput {
    train: MetricsReport,
    test: MetricsReport,
    heads: Vec<MetricsReport>,
    /// Each subnetwork on its own slot with the others zeroed.
    subnetworks: Vec<MetricsReport>,
}

#[derive(Serialize)]
struct SparsityOutput {
    #[serde(flatten)]
    report: analysis::SparsityReport,
    test: MetricsReport,
}

/// Isolated metrics of every subnetwork, or none when slices are unsupported.
fn subnetwork_metrics(net: &Network, data: &Dataset) -> Result<Vec<MetricsReport>, CliError> {
    let mut out = Vec::new();
    for m in 0..net.ensemble_size() {
        let pred = match landscape::subnetwork_predictions(net, m, data.features()) {
            Ok(p) => p,
            Err(LandscapeError::Unsupported(_)) => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        out.push(analysis::prediction_metrics(&pred, data)?);
    }
    Ok(out)
}

pub fn analyze(common: &Common, kind: AnalyzeKind, checkpoint: &Path) -> Result<PathBuf, CliError> {
    let config = common.load()?;
    let net = load_network(checkpoint)?;
    let (train_set, test_set) = config.data.load(0)?;
    check_data(net.config(), &train_set)?;
    let name = kind.name();
    let mut out = OutputDir::create(
        resolve_output_dir(common.output_dir.as_deref(), &config),
        &format!("analyze-{name}"),
    )?;
    let mut seeds = vec![net.config().init_seed];
    match kind {
        AnalyzeKind::Diversity => {
            require_heads(&net, "diversity")?;
            let report = analysis::pairwise_diversity(&net, &test_set)?;
            let mut rows = Vec::new();
            for metric in DistanceMetric::ALL {
                let stat = report.statistic(metric);
                for (i, row) in stat.matrix.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        rows.push(vec![metric.name().to_string(), i.to_string(), j.to_string(), v.to_string()]);
                    }
                }
            }
            out.write("diversity.csv", &csv_bytes(&["metric", "head_i", "head_j", "value"], rows)?)?;
            out.write_json("diversity.json", &report)?;
        }
        AnalyzeKind::Invariance => {
            require_heads(&net, "invariance")?;
            let mut rng = rng_from_seed(config.analysis.seed);
            seeds.push(config.analysis.seed);
            let r = config.analysis.invariance_resamples;
            let report = InvarianceOutput {
                train: analysis::invariance(&net, &train_set, r, &mut rng)?,
                test: analysis::invariance(&net, &test_set, r, &mut rng)?,
            };
            let rows = [("train", &report.train), ("test", &report.test)].map(|(s, i)| {
                vec![
                    s.to_string(),
                    i.examples.to_string(),
                    i.resamples.to_string(),
                    i.disagreement.to_string(),
                    i.kl.to_string(),
                    i.cosine.to_string(),
                ]
            });
            out.write(
                "invariance.csv",
                &csv_bytes(&["split", "examples", "resamples", "disagreement", "kl", "cosine"], rows)?,
            )?;
            out.write_json("invariance.json", &report)?;
        }
        AnalyzeKind::Separation => {
            require_heads(&net, "separation")?;
            let plan = &config.analysis.separation;
            if let analysis::FixingPlan::Sampled { seed, .. } = plan {
                seeds.push(*seed);
            }
            let report = analysis::conditional_variances(&net, &train_set, plan)?;
            let mut header: Vec<String> = vec!["member".into(), "layer".into(), "unit".into()];
            header.extend((0..report.slots).map(|m| format!("var_{m}")));
            header.extend(["dominant_slot".into(), "dominance_share".into()]);
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows = report.units.iter().map(|u| {
                let mut row = vec![
                    u.member.map(|m| m.to_string()).unwrap_or_default(),
                    u.layer.to_string(),
                    u.unit.to_string(),
                ];
                row.extend(u.variances.iter().map(f64::to_string));
                row.push(u.dominant_slot.to_string());
                row.push(opt(u.dominance_share));
                row
            });
            out.write("separation.csv", &csv_bytes(&header, rows)?)?;
            let threshold = config.analysis.dominance_threshold;
            out.write_json(
                "separation.json",
                &SeparationOutput {
                    slots: report.slots,
                    units: report.units.len(),
                    dominance_threshold: threshold,
                    dominant_fraction: report.dominant_fraction(threshold),
                    plan,
                },
            )?;
        }
        AnalyzeKind::Metrics => {
            let isolated = test_set.head(config.landscape.max_examples);
            let report = MetricsOutput {
                train: analysis::metrics(&net, &train_set)?,
                test: analysis::metrics(&net, &test_set)?,
                heads: analysis::head_metrics(&net, &test_set)?,
                subnetworks: subnetwork_metrics(&net, &isolated)?,
            };
            let mut rows = vec![
                metrics_row("ensemble", "", "train", &report.train),
                metrics_row("ensemble", "", "test", &report.test),
            ];
            rows.extend(report.heads.iter().enumerate().map(|(m, r)| metrics_row("head", &m.to_string(), "test", r)));
            rows.extend(
                report
                    .subnetworks
                    .iter()
                    .enumerate()
                    .map(|(m, r)| metrics_row("subnetwork", &m.to_string(), "test", r)),
            );
            out.write("metrics.csv", &csv_bytes(&METRICS_HEADER, rows)?)?;
            out.write_json("metrics.json", &report)?;
        }
        AnalyzeKind::Sparsity => {
            let report = SparsityOutput {
                report: analysis::sparsity(&net, config.analysis.sparsity_threshold),
                test: analysis::metrics(&net, &test_set)?,
            };
            let r = &report.report;
            let row = vec![
                r.threshold.to_string(),
                r.weights.to_string(),
                r.nonzero.to_string(),
                r.nonzero_fraction.to_string(),
                opt(report.test.accuracy),
                opt(report.test.nll),
            ];
            out.write(
                "sparsity.csv",
                &csv_bytes(&["threshold", "weights", "nonzero", "nonzero_fraction", "accuracy", "nll"], [row])?,
            )?;
            out.write_json("sparsity.json", &report)?;
        }
    }
    common.log(format!("{name} report written to {}", out.root().display()));
    out.finish(&config, &seeds)
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    ensemble_size: usize,
    value_index: usize,
    value: f64,
    replicate: usize,
}

#[derive(Serialize, Deserialize)]
struct CachedCell {
    config_hash: String,
    row: SweepRow,
}

const SWEEP_COLUMNS: [&str; 12] = [
    "kind",
    "axis",
    "value",
    "ensemble_size",
    "replicate",
    "final_loss",
    "accuracy",
    "nll",
    "ece",
    "mse",
    "disagreement",
    "nonzero_fraction",
];

fn sweep_record(kind: &str, replicate: &str, row: &SweepRow) -> Vec<String> {
    vec![
        kind.into(),
        row.axis.to_string(),
        row.value.to_string(),
        row.ensemble_size.to_string(),
        replicate.into(),
        row.final_loss.to_string(),
        opt(row.metrics.accuracy),
        opt(row.metrics.nll),
        opt(row.metrics.ece),
        opt(row.metrics.mse),
        opt(row.disagreement),
        row.nonzero_fraction.to_string(),
    ]
}

/// Mean and sample standard deviation of one group, in sweep row form.
fn summary_rows(group: &[&SweepRow]) -> [SweepRow; 2] {
    let column = |f: &dyn Fn(&SweepRow) -> Option<f64>| -> Option<(f64, f64)> {
        let xs: Option<Vec<f64>> = group.iter().map(|r| f(r)).collect();
        xs.map(|v| experiment::mean_std(&v))
    };
    let loss = column(&|r| Some(r.final_loss)).expect("present");
    let acc = column(&|r| r.metrics.accuracy);
    let nll = column(&|r| r.metrics.nll);
    let ece = column(&|r| r.metrics.ece);
    let mse = column(&|r| r.metrics.mse);
    let dis = column(&|r| r.disagreement);
    let nz = column(&|r| Some(r.nonzero_fraction)).expect("present");
    let first = group[0];
    let pick = |second: bool| {
        let g = |p: Option<(f64, f64)>| p.map(|(m, s)| if second { s } else { m });
        SweepRow {
            axis: first.axis,
            value: first.value,
            replicate: group.len(),
            ensemble_size: first.ensemble_size,
            final_loss: if second { loss.1 } else { loss.0 },
            metrics: MetricsReport {
                examples: first.metrics.examples,
                accuracy: g(acc),
                nll: g(nll),
                ece: g(ece),
                mse: g(mse),
            },
            disagreement: g(dis),
            nonzero_fraction: if second { nz.1 } else { nz.0 },
        }
    };
    [pick(false), pick(true)]
}

#[derive(Serialize)]
struct SweepOutput {
    axis: SweepAxis,
    replicates: usize,
    rows: Vec<SweepRow>,
    means: Vec<SweepRow>,
    std_devs: Vec<SweepRow>,
}

pub fn sweep(common: &Common) -> Result<PathBuf, CliError> {
    let config = common.load()?;
    let section = config.sweep.clone().ok_or_else(|| CliError::Config {
        path: "sweep".into(),
        message: "the sweep command needs a sweep section".into(),
    })?;
    let base = config.setup();
    let hash = config.content_hash();
    let mut out = OutputDir::create(resolve_output_dir(common.output_dir.as_deref(), &config), "sweep")?;

    let sizes = section.ensemble_sizes.clone().unwrap_or_else(|| vec![config.network.ensemble_size]);
    let mut setups: Vec<ExperimentSetup> = Vec::new();
    for &m in &sizes {
        setups.push(SweepAxis::EnsembleSize.apply(&base, m as f64).map_err(CliError::from)?);
    }
    let mut cells = Vec::new();
    for &m in &sizes {
        for (i, &v) in section.values.iter().enumerate() {
            // fail fast on values the axis cannot take
            let setup = &setups[sizes.iter().position(|&s| s == m).expect("listed")];
            section.axis.apply(setup, v).map_err(|e| CliError::Config {
                path: format!("sweep.values[{i}]"),
                message: e.to_string(),
            })?;
            for r in 0..section.replicates {
                cells.push(Cell {
                    ensemble_size: m,
                    value_index: i,
                    value: v,
                    replicate: r,
                });
            }
        }
    }

    let cache_dir = format!("sweep_cells/{}", &hash[..16]);
    std::fs::create_dir_all(out.path(&cache_dir)).map_err(CliError::io(out.path(&cache_dir)))?;
    let cell_name =
        |c: &Cell| format!("{cache_dir}/m{}-v{}-r{}.json", c.ensemble_size, c.value_index, c.replicate);
    let root = out.root().to_path_buf();
    let results = experiment::parallel_map(&cells, config.workers, |c| {
        let path = root.join(cell_name(c));
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(cached) = serde_json::from_slice::<CachedCell>(&bytes) {
                if cached.config_hash == hash && cached.row.replicate == c.replicate {
                    return Ok((cached.row, true));
                }
            }
        }
        let setup = &setups[sizes.iter().position(|&s| s == c.ensemble_size).expect("listed")];
        let row = experiment::run_cell(setup, section.axis, c.value, c.replicate, section.base_seed)?;
        let cached = CachedCell {
            config_hash: hash.clone(),
            row,
        };
        let bytes = serde_json::to_vec_pretty(&cached).map_err(|e| ExperimentError::InvalidSetup(e.to_string()))?;
        write_atomic(&path, &bytes).map_err(|e| ExperimentError::Pool(e.to_string()))?;
        Ok((cached.row, false))
    })?;
    let reused = results.iter().filter(|(_, cached)| *cached).count();
    common.log(format!("{} cells, {reused} reused", results.len()));
    for c in &cells {
        out.record(&cell_name(c))?;
    }

    let rows: Vec<SweepRow> = results.into_iter().map(|(r, _)| r).collect();
    let mut means = Vec::new();
    let mut std_devs = Vec::new();
    let mut records = Vec::new();
    for (c, r) in cells.iter().zip(&rows) {
        records.push(sweep_record("replicate", &c.replicate.to_string(), r));
    }
    for &m in &sizes {
        for i in 0..section.values.len() {
            let group: Vec<&SweepRow> = cells
                .iter()
                .zip(&rows)
                .filter(|(c, _)| c.ensemble_size == m && c.value_index == i)
                .map(|(_, r)| r)
                .collect();
            let [mean, sd] = summary_rows(&group);
            records.push(sweep_record("mean", "", &mean));
            records.push(sweep_record("std", "", &sd));
            means.push(mean);
            std_devs.push(sd);
        }
    }
    out.write("sweep.csv", &csv_bytes(&SWEEP_COLUMNS, records)?)?;
    out.write_json(
        "sweep.json",
        &SweepOutput {
            axis: section.axis,
            replicates: section.replicates,
            rows,
            means,
            std_devs,
        },
    )?;
    out.finish(&config, &[section.base_seed])
}

pub fn bias_variance(common: &Common) -> Result<PathBuf, CliError> {
    let config = common.load()?;
    let section = config.bias_variance.clone().ok_or_else(|| CliError::Config {
        path: "bias_variance".into(),
        message: "the bias-variance command needs a bias_variance section".into(),
    })?;
    let base = config.setup();
    let mut out = OutputDir::create(resolve_output_dir(common.output_dir.as_deref(), &config), "bias-variance")?;
    let mut reports = Vec::new();
    for &m in &section.ensemble_sizes {
        common.log(format!("M = {m}: {} replicates", section.replicates));
        let setup = SweepAxis::EnsembleSize.apply(&base, m as f64)?;
        reports.push(analysis::bias_variance(&setup, section.replicates, section.base_seed, config.workers)?);
    }
    let rows = reports.iter().map(|r| {
        vec![
            r.ensemble_size.to_string(),
            r.replicates.to_string(),
            r.test_examples.to_string(),
            r.expected_error.to_string(),
            r.bias_squared.to_string(),
            r.variance.to_string(),
            r.error_standard_error.to_string(),
            r.bias_standard_error.to_string(),
            r.identity_gap().to_string(),
        ]
    });
    out.write(
        "bias_variance.csv",
        &csv_bytes(
            &[
                "ensemble_size",
                "replicates",
                "test_examples",
                "expected_error",
                "bias_squared",
                "variance",
                "error_standard_error",
                "bias_standard_error",
                "identity_gap",
            ],
            rows,
        )?,
    )?;
    out.write_json("bias_variance.json", &reports)?;
    if let Some(bad) = reports.iter().find(|r| !r.identity_holds()) {
        return Err(CliError::Numeric(format!(
            "bias-variance identity violated for M = {} (gap {})",
            bad.ensemble_size,
            bad.identity_gap()
        )));
    }
    out.finish(&config, &[section.base_seed])
}

#[derive(Serialize)]
struct LandscapeSummary<'a> {
    resolution: usize,
    examples: usize,
    subnetwork_accuracy: &'a [f64],
    subnetwork_disagreement: &'a [Vec<f64>],
    max_subnetwork_disagreement: f64,
    origin_distance: f64,
    projection_variance: Option<[f64; 2]>,
}

pub fn landscape(common: &Common, checkpoint: &Path) -> Result<PathBuf, CliError> {
    let config = common.load()?;
    let net = load_network(checkpoint)?;
    if net.ensemble_size() != 3 || net.architecture() == Architecture::DeepEnsemble {
        return Err(CliError::Usage(format!(
            "landscape needs a checkpoint with 3 subnetworks sharing one body, got {} ({:?})",
            net.ensemble_size(),
            net.architecture()
        )));
    }
    let (_, test_set) = config.data.load(0)?;
    check_data(net.config(), &test_set)?;
    let mut out = OutputDir::create(resolve_output_dir(common.output_dir.as_deref(), &config), "landscape")?;
    let report = landscape::plane_section(&net, &test_set, &config.landscape)?;
    out.write_with("landscape_grid.csv", |buf| Ok(report.write_csv(buf)?))?;
    out.write_with("landscape_anchors.csv", |buf| Ok(report.write_anchor_csv(buf)?))?;

    let trajectory_path = checkpoint.with_file_name(TRAJECTORY_FILE);
    let mut projection_variance = None;
    if trajectory_path.exists() {
        let bytes = std::fs::read(&trajectory_path).map_err(CliError::io(&trajectory_path))?;
        let log: TrajectoryLog = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Input(format!("{}: {e}", trajectory_path.display())))?;
        let projection = landscape::project_trajectories(&log)?;
        out.write_with("projection.csv", |buf| Ok(projection.write_csv(buf)?))?;
        projection_variance = Some(projection.component_variance);
    }
    out.write_json(
        "landscape.json",
        &LandscapeSummary {
            resolution: report.resolution,
            examples: report.examples,
            subnetwork_accuracy: &report.subnetwork_accuracy,
            subnetwork_disagreement: &report.subnetwork_disagreement,
            max_subnetwork_disagreement: report.max_subnetwork_disagreement(),
            origin_distance: report.origin_distance,
            projection_variance,
        },
    )?;
    out.finish(&config, &[net.config().init_seed])
}
