//! Command-line front end.
//!
//! Failures print one line, `error: <kind>: <message>`, and exit nonzero.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bn::{BayesianNetwork, EvidenceMatrix};
use crate::bp::{bp_infer, VariableIndex};
use crate::metrics::{self, MeanSd, MetricsReport, RunMetrics};
use crate::model::{positive_mass, Components, ModelConfig};
use crate::synth::{generate_splits, stratified_folds, GeneratorSpec, SyntheticDataset};
use crate::train::{alternate_train, attribute_importance, TrainConfig, TrainError, TrainedModel, TrainingData};

/// Everything a run needs; every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorSpec,
    pub model: ModelConfig,
    pub components: Components,
    pub train: TrainConfig,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // keep it on one line
        write!(f, "error: {}: {}", self.kind, self.message.replace('\n', " "))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::Config(_) => "config",
            TrainError::Data(_) => "data",
            TrainError::Bundle(_) => "bundle",
            _ => "train",
        };
        Self::new(kind, e.to_string())
    }
}

impl From<crate::synth::SynthError> for CliError {
    fn from(e: crate::synth::SynthError) -> Self {
        use crate::synth::SynthError as S;
        let kind = match &e {
            S::Spec(_) => "config",
            S::Io { .. } => "io",
            _ => "data",
        };
        Self::new(kind, e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hybrid-reason", version, about = "Bayesian-network / GCN hybrid classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a ground-truth network and train/val/test datasets.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the bundle and per-epoch history.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        switches: Switches,
    },
    /// Metrics of a model (or of stored predictions) on a dataset.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        model: Option<PathBuf>,
        /// JSON list of per-sample disease distributions, used instead of a model.
        #[arg(long, conflicts_with = "model")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = metrics::DEFAULT_CUTOFF)]
        cutoff: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-attribute importance by deactivation.
    Importance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a trained network's structure and tables.
    InspectBn {
        #[arg(long)]
        model: PathBuf,
        /// 1 for the evidence network, 2 for the final one.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        network: u8,
        /// Also dump every message-passing step for one sample of this dataset.
        #[arg(long)]
        messages: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Compare the full model against one with components switched off.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Held-out set; without it, stratified cross-validation over `--data`.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        switches: Switches,
    },
}

#[derive(Debug, Clone, Copy, Default, Args)]
pub struct Switches {
    #[arg(long)]
    pub no_bn1: bool,
    #[arg(long)]
    pub no_bn2: bool,
    #[arg(long)]
    pub no_coupling_attention: bool,
    #[arg(long)]
    pub no_channel_attention: bool,
    #[arg(long)]
    pub no_grad_bn: bool,
    #[arg(long)]
    pub no_alter_train: bool,
}

impl Switches {
    pub fn any(&self) -> bool {
        self.no_bn1
            || self.no_bn2
            || self.no_coupling_attention
            || self.no_channel_attention
            || self.no_grad_bn
            || self.no_alter_train
    }

    pub fn apply(&self, mut c: Components) -> Components {
        c.bn1 &= !self.no_bn1;
        c.bn2 &= !self.no_bn2;
        c.spatial_attention &= !self.no_coupling_attention;
        c.channel_attention &= !self.no_channel_attention;
        c.grad_through_bn &= !self.no_grad_bn;
        c.alternate_training &= !self.no_alter_train;
        c
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::new("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

/// Runs a command and returns what it would print.
pub fn run(command: Command) -> CliResult<String> {
    match command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Train {
            config,
            data,
            seed,
            out,
            switches,
        } => train(config.as_deref(), &data, seed, &out, switches),
        Command::Eval {
            model,
            predictions,
            data,
            cutoff,
            out,
        } => eval(model.as_deref(), predictions.as_deref(), &data, cutoff, out.as_deref()),
        Command::Importance { model, data, out } => importance(&model, &data, out.as_deref()),
        Command::InspectBn {
            model,
            network,
            messages,
            sample,
        } => inspect_bn(&model, network, messages.as_deref(), sample),
        Command::Ablate {
            config,
            data,
            test,
            folds,
            repeats,
            seed,
            out,
            switches,
        } => ablate(
            config.as_deref(),
            &data,
            test.as_deref(),
            folds,
            repeats,
            seed,
            out.as_deref(),
            switches,
        ),
    }
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let cfg: RunConfig = serde_json::from_str(&read(path)?)
        .map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
    cfg.train.validate()?;
    cfg.generator.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> CliResult<SyntheticDataset> {
    Ok(SyntheticDataset::read(path)?)
}

fn load_model(path: &Path) -> CliResult<TrainedModel> {
    TrainedModel::from_json(&read(path)?).map_err(|e| CliError::new("bundle", format!("{}: {e}", path.display())))
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult<String> {
    let mut spec = load_config(config)?.generator;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let splits = generate_splits(&spec)?;
    ensure_dir(out)?;
    for (name, d) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        d.write(&out.join(format!("{name}.json")))?;
    }
    let net = serde_json::to_string_pretty(&splits.network).expect("network serializes");
    write(&out.join("network.json"), &net)?;
    Ok(format!(
        "wrote {} train, {} val, {} test samples to {}\n",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    ))
}

fn fit(data: &SyntheticDataset, cfg: &RunConfig, components: Components, seed: u64) -> CliResult<TrainedModel> {
    let td = TrainingData {
        features: data.features.view(),
        grades: &data.grades,
        nodes: data.nodes,
        grades_per_node: data.grades_per_node,
    };
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    Ok(alternate_train(&td, &cfg.model, components, &tc)?)
}

fn train(config: Option<&Path>, data: &Path, seed: Option<u64>, out: &Path, switches: Switches) -> CliResult<String> {
    let cfg = load_config(config)?;
    let data = load_data(data)?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let trained = fit(&data, &cfg, switches.apply(cfg.components), seed)?;
    ensure_dir(out)?;
    write(&out.join("model.json"), &trained.to_json())?;
    let history = serde_json::to_string_pretty(&trained.history).expect("history serializes");
    write(&out.join("history.json"), &history)?;
    let last = trained.history.last().map_or(f64::NAN, |h| h.loss);
    Ok(format!(
        "trained {} epochs, final loss {last:.6}; bundle in {}\n",
        trained.history.len(),
        out.display()
    ))
}

fn eval(
    model: Option<&Path>,
    predictions: Option<&Path>,
    data: &Path,
    cutoff: f64,
    out: Option<&Path>,
) -> CliResult<String> {
    let data = load_data(data)?;
    let run = match (model, predictions) {
        (Some(m), _) => metrics::evaluate(&load_model(m)?, &data, cutoff)?,
        (None, Some(p)) => eval_predictions(p, &data, cutoff)?,
        (None, None) => return Err(CliError::new("usage", "either --model or --predictions is required")),
    };
    let report = MetricsReport::aggregate(std::slice::from_ref(&run));
    let table = report.to_table();
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("report.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
        write(&dir.join("report.txt"), &table)?;
    }
    Ok(table)
}

fn eval_predictions(path: &Path, data: &SyntheticDataset, cutoff: f64) -> CliResult<RunMetrics> {
    let dists: Vec<Vec<f64>> = serde_json::from_str(&read(path)?)
        .map_err(|e| CliError::new("data", format!("{}: {e}", path.display())))?;
    if dists.len() != data.len() {
        return Err(CliError::new(
            "data",
            format!("{} predictions for {} samples", dists.len(), data.len()),
        ));
    }
    let ev = EvidenceMatrix::from_rows(&dists).map_err(|e| CliError::new("data", e.to_string()))?;
    if ev.grades() != data.grades_per_node {
        return Err(CliError::new("data", "prediction width differs from the grade count"));
    }
    let scores: Vec<f64> = dists.iter().map(|d| positive_mass(d).clamp(0.0, 1.0)).collect();
    let binary = metrics::compute_metrics(&scores, &data.binary_labels(), cutoff)
        .map_err(|e| CliError::new("data", e.to_string()))?;
    let truth: Vec<usize> = data.grades.iter().map(|g| g[0]).collect();
    Ok(RunMetrics {
        binary,
        off_by_one: metrics::off_by_one_accuracy(&ev.argmax_grades(), &truth).ok(),
        attribute_accuracy: Vec::new(),
    })
}

fn importance(model: &Path, data: &Path, out: Option<&Path>) -> CliResult<String> {
    let trained = load_model(model)?;
    let data = load_data(data)?;
    #[derive(Serialize)]
    struct Row {
        attribute: usize,
        mean: f64,
        sd: f64,
        feature_fallback: bool,
    }
    let mut rows = Vec::new();
    for a in 1..trained.model.shape.nodes {
        let imp = attribute_importance(&trained, data.features.view(), a)?;
        let m = MeanSd::of(&imp.scores);
        rows.push(Row {
            attribute: a,
            mean: m.mean,
            sd: m.sd,
            feature_fallback: imp.feature_fallback,
        });
    }
    let mut table = format!("{:<10}{:>12}{:>12}\n", "attribute", "mean", "sd");
    for r in &rows {
        let mark = if r.feature_fallback { "  (no grade-1 feature)" } else { "" };
        let _ = writeln!(table, "{:<10}{:>12.6}{:>12.6}{mark}", r.attribute, r.mean, r.sd);
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("importance.json"), &serde_json::to_string_pretty(&rows).expect("rows serialize"))?;
    }
    Ok(table)
}

fn describe_network(net: &BayesianNetwork) -> String {
    let mut s = String::new();
    let edges = net.edges();
    let _ = writeln!(s, "nodes {} grades {} edges {}", net.node_count(), net.grades(), edges.len());
    for (a, b) in edges {
        let _ = writeln!(s, "  {a} -> {b}");
    }
    for v in 0..net.node_count() {
        let _ = writeln!(s, "node {v} parents {:?}", net.parents(v));
        for (r, row) in net.cpt(v).iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|p| format!("{p:.4}")).collect();
            let _ = writeln!(s, "  row {r:<4}{}", cells.join(" "));
        }
    }
    s
}

fn inspect_bn(model: &Path, network: u8, messages: Option<&Path>, sample: usize) -> CliResult<String> {
    let trained = load_model(model)?;
    let m = &trained.model;
    let net = if network == 1 { &m.bn1 } else { &m.bn2 };
    let mut out = describe_network(net);
    if let Some(path) = messages {
        let data = load_data(path)?;
        if sample >= data.len() {
            return Err(CliError::new("data", format!("sample {sample} out of range ({} samples)", data.len())));
        }
        let x = data.features.slice(ndarray::s![sample..sample + 1, ..]);
        let pred = m.predict(x).map_err(|e| CliError::new("model", e.to_string()))?;
        // BN-1 sees the initial evidence, BN-2 the fused output.
        let evidence = if network == 1 { pred.p0_b(0) } else { pred.fused(0) };
        let bp = m.config.bp;
        let outcome = bp_infer(net, &evidence, bp.max_steps, bp.tol)
            .map_err(|e| CliError::new("model", e.to_string()))?;
        let index = VariableIndex::new(net);
        let dump: Vec<_> = outcome
            .trajectory()
            .iter()
            .map(|s| s.dump(&index, outcome.evidence()))
            .collect();
        out.push_str(&serde_json::to_string_pretty(&dump).expect("dump serializes"));
        out.push('\n');
    }
    Ok(out)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    config: Option<&Path>,
    data: &Path,
    test: Option<&Path>,
    folds: usize,
    repeats: usize,
    seed: Option<u64>,
    out: Option<&Path>,
    switches: Switches,
) -> CliResult<String> {
    if repeats == 0 {
        return Err(CliError::new("usage", "--repeats must be at least 1"));
    }
    let cfg = load_config(config)?;
    let data = load_data(data)?;
    let base_seed = seed.unwrap_or(cfg.train.seed);
    // (train, test) pairs
    let splits: Vec<(SyntheticDataset, SyntheticDataset)> = match test {
        Some(t) => vec![(data, load_data(t)?)],
        None => {
            if folds < 2 {
                return Err(CliError::new("usage", "--folds must be at least 2"));
            }
            let fold = stratified_folds(&data.binary_labels(), folds, base_seed);
            (0..folds)
                .map(|k| {
                    let tr: Vec<usize> = (0..data.len()).filter(|&i| fold[i] != k).collect();
                    let te: Vec<usize> = (0..data.len()).filter(|&i| fold[i] == k).collect();
                    (data.subset(&tr), data.subset(&te))
                })
                .collect()
        }
    };
    let full = cfg.components;
    let variant = switches.apply(full);
    let mut variants = vec![("full", full)];
    if switches.any() {
        variants.push(("ablated", variant));
    }
    #[derive(Serialize)]
    struct Entry {
        name: &'static str,
        components: Components,
        median_accuracy: f64,
        report: MetricsReport,
    }
    let mut entries = Vec::new();
    for (name, comps) in variants {
        let mut runs = Vec::new();
        for (k, (tr, te)) in splits.iter().enumerate() {
            for r in 0..repeats {
                let s = base_seed + (k * repeats + r) as u64;
                let trained = fit(tr, &cfg, comps, s)?;
                runs.push(metrics::evaluate(&trained, te, metrics::DEFAULT_CUTOFF)?);
            }
        }
        let accs: Vec<f64> = runs.iter().map(|r| r.binary.accuracy).collect();
        entries.push(Entry {
            name,
            components: comps,
            median_accuracy: median(&accs),
            report: MetricsReport::aggregate(&runs),
        });
    }
    let mut text = String::new();
    for e in &entries {
        let _ = writeln!(text, "== {} (median accuracy {:.2})", e.name, e.median_accuracy);
        text.push_str(&e.report.to_table());
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join("ablation.json"), &serde_json::to_string_pretty(&entries).expect("entries serialize"))?;
    }
    Ok(text)
}
