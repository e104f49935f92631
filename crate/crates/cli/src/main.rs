//! Single binary exposing the pipeline: synthesize, split, train, eval,
//! bootstrap, ablate, attn. Every run is reproducible from its --seed.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use perturbkg_core::ablate::{self, MatrixConfig};
use perturbkg_core::attn;
use perturbkg_core::chem;
use perturbkg_core::dataset::Dataset;
use perturbkg_core::graph::{self, HeteroGraph, NodeType};
use perturbkg_core::metrics;
use perturbkg_core::model::{load_model, AttentionScope, ModelConfig, ModelKind};
use perturbkg_core::synth::{self, SynthParams};
use perturbkg_core::trainer::{self, SplitKind, TrainConfig};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "perturbkg", version, about = "Perturbation-delta prediction over a typed biomedical graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset
    Synth(SynthArgs),
    /// Produce a train/test drug split with a leakage audit
    Split(SplitArgs),
    /// Train a model and write checkpoint + history
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test side of a split
    Eval(EvalArgs),
    /// Paired bootstrap comparison of two per-sample metric CSVs
    Bootstrap(BootstrapArgs),
    /// Run the full model x split x ablation matrix
    Ablate(AblateArgs),
    /// Attention aggregates or a per-drug reasoning subgraph
    Attn(AttnArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for graph, dataset, and truth.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    n_drugs: usize,
    #[arg(long, default_value_t = 100)]
    n_proteins: usize,
    #[arg(long, default_value_t = 20)]
    n_pathways: usize,
    #[arg(long, default_value_t = 3)]
    n_cells: usize,
    /// Expression vector width
    #[arg(long, default_value_t = 64)]
    g: usize,
    #[arg(long, default_value_t = 1)]
    min_targets: usize,
    #[arg(long, default_value_t = 3)]
    max_targets: usize,
    #[arg(long, default_value_t = 30)]
    families: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset directory produced by `synth`
    #[arg(long)]
    data: PathBuf,
    /// scaffold | random
    #[arg(long)]
    mode: String,
    #[arg(long, default_value_t = 0.8)]
    frac: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output JSON path (default DATA/split_MODE.json)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Split JSON produced by `split`
    #[arg(long)]
    split: PathBuf,
    /// mlp | mlp_targets | gat
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    /// Per-hop neighbor fanouts, outermost first
    #[arg(long, default_value = "20,10", value_parser = parse_fanouts)]
    fanouts: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    embed: usize,
    #[arg(long, default_value_t = 1024)]
    enc_hidden: usize,
    #[arg(long, default_value_t = 1024)]
    delta_hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// per_type | across_types
    #[arg(long, default_value = "per_type")]
    scope: String,
    #[arg(long, default_value_t = 50)]
    deg_k: usize,
    /// Output directory for model.ckpt and history.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "20,10", value_parser = parse_fanouts)]
    fanouts: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    deg_k: usize,
    /// Output directory for per_sample.csv and summary.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BootstrapArgs {
    /// Per-sample CSV for condition A (from `eval`)
    #[arg(long)]
    a: PathBuf,
    /// Per-sample CSV for condition B
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Metric column to compare
    #[arg(long, default_value = "deg")]
    metric: String,
    /// Output JSON path (default stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run the full model x split x ablation matrix
    #[arg(long, required = true)]
    matrix: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// The matrix protocol trains longer and narrower than `train`'s
    /// defaults; the planted benchmark is small enough to need it
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 0.002)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value = "20,10", value_parser = parse_fanouts)]
    fanouts: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    embed: usize,
    #[arg(long, default_value_t = 512)]
    enc_hidden: usize,
    #[arg(long, default_value_t = 512)]
    delta_hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value = "across_types")]
    scope: String,
    #[arg(long, default_value_t = 0.8)]
    frac: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 50)]
    deg_k: usize,
    /// Output directory (results.csv plus one subdir per cell)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Drug id; with it, export a reasoning subgraph, without it an
    /// aggregate source-type CSV over all drugs
    #[arg(long)]
    drug: Option<String>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    top_m: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "20,10", value_parser = parse_fanouts)]
    fanouts: Vec<usize>,
    /// Output path (default stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_fanouts(s: &str) -> Result<Vec<usize>, String> {
    let v: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse()).collect();
    match v {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(format!("expected comma-separated positive integers, got '{s}'")),
    }
}

fn parse_split_kind(s: &str) -> Result<SplitKind> {
    SplitKind::parse(s).ok_or_else(|| anyhow!("unknown split mode '{s}' (scaffold|random)"))
}

fn parse_model_kind(s: &str) -> Result<ModelKind> {
    ModelKind::parse(s).ok_or_else(|| anyhow!("unknown model '{s}' (mlp|mlp_targets|gat)"))
}

fn parse_scope(s: &str) -> Result<AttentionScope> {
    match s {
        "per_type" => Ok(AttentionScope::PerType),
        "across_types" => Ok(AttentionScope::AcrossTypes),
        _ => bail!("unknown attention scope '{s}' (per_type|across_types)"),
    }
}

fn load_world(data: &Path) -> Result<(HeteroGraph, Dataset)> {
    let graph = graph::load(&data.join("manifest.json"))
        .with_context(|| format!("loading graph from {}", data.display()))?;
    let dataset = Dataset::load(data)
        .with_context(|| format!("loading dataset from {}", data.display()))?;
    dataset.validate_against(&graph)?;
    Ok((graph, dataset))
}

fn load_split(path: &Path) -> Result<chem::SplitAssignment> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading split {}", path.display()))?;
    // accept both a bare assignment and the audited document `split` writes
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let node = doc.get("assignment").unwrap_or(&doc);
    Ok(serde_json::from_value(node.clone())?)
}

fn write_or_print(out: Option<&PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, content)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("{}", path.display());
            Ok(())
        }
        None => {
            println!("{content}");
            Ok(())
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let params = SynthParams {
        n_drugs: a.n_drugs,
        n_proteins: a.n_proteins,
        n_pathways: a.n_pathways,
        n_cells: a.n_cells,
        g: a.g,
        min_targets: a.min_targets,
        max_targets: a.max_targets,
        scaffold_families: a.families,
        noise_sd: a.noise_sd,
        seed: a.seed,
    };
    let (graph, dataset, _) = synth::generate_to_dir(&params, &a.out)?;
    println!(
        "wrote {}: {} drugs, {} samples, g={}",
        a.out.display(),
        graph.ids(NodeType::Drug).len(),
        dataset.n_samples(),
        dataset.g()
    );
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let kind = parse_split_kind(&a.mode)?;
    let (graph, _) = load_world(&a.data)?;
    let assignment = ablate::compute_split(&graph, kind, a.frac, a.seed)?;
    let drugs = ablate::drug_smiles(&graph);
    let audit = chem::leakage_audit(&drugs, &assignment)?;
    let leaked = chem::leaked_keys(&audit);
    let doc = json!({
        "mode": kind.as_str(),
        "assignment": assignment,
        "audit": audit,
        "leaked_scaffolds": leaked,
    });
    let out = a
        .out
        .unwrap_or_else(|| a.data.join(format!("split_{}.json", kind.as_str())));
    write_or_print(Some(&out), &serde_json::to_string_pretty(&doc)?)?;
    println!(
        "train {} test {} achieved_frac {:.4} leaked {}",
        assignment.train.len(),
        assignment.test.len(),
        assignment.achieved_train_fraction,
        leaked.len()
    );
    Ok(())
}

fn model_config_for(
    kind: ModelKind,
    graph: &HeteroGraph,
    g: usize,
    seed: u64,
    embed: usize,
    enc_hidden: usize,
    delta_hidden: usize,
    heads: usize,
    dropout: f64,
    scope: AttentionScope,
) -> ModelConfig {
    let mut cfg = ModelConfig::for_graph(kind, graph, g, seed);
    cfg.embed_dim = embed;
    cfg.enc_hidden = enc_hidden;
    cfg.delta_hidden = delta_hidden;
    cfg.heads = heads;
    cfg.dropout = dropout;
    cfg.attention_scope = scope;
    cfg
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let kind = parse_model_kind(&a.model)?;
    let scope = parse_scope(&a.scope)?;
    let (graph, dataset) = load_world(&a.data)?;
    let assignment = load_split(&a.split)?;
    let (train_idx, test_idx) = trainer::split_sample_indices(&dataset, &assignment);
    let model_cfg = model_config_for(
        kind, &graph, dataset.g(), a.seed, a.embed, a.enc_hidden, a.delta_hidden,
        a.heads, a.dropout, scope,
    );
    model_cfg.validate()?;
    let mut cfg = TrainConfig::new(kind, a.seed);
    cfg.lr = a.lr;
    cfg.batch_size = a.batch;
    cfg.epochs = a.epochs;
    cfg.fanouts = a.fanouts.clone();
    cfg.deg_k = a.deg_k;
    let out = trainer::train(&graph, &dataset, &model_cfg, &cfg, &train_idx, &test_idx, &a.out)?;
    println!(
        "checkpoint {} best_epoch {} best_test_deg {:.4}",
        out.checkpoint.display(),
        out.best_epoch,
        out.best_test_deg
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (graph, dataset) = load_world(&a.data)?;
    let assignment = load_split(&a.split)?;
    let (_, test_idx) = trainer::split_sample_indices(&dataset, &assignment);
    let (model_cfg, store) = load_model(&a.ckpt)?;
    let mut cfg = TrainConfig::new(model_cfg.kind, a.seed);
    cfg.fanouts = a.fanouts.clone();
    cfg.deg_k = a.deg_k;
    let evals = trainer::evaluate_epoch(&graph, &dataset, &model_cfg, &store, &cfg, &test_idx, 0)?;

    std::fs::create_dir_all(&a.out)?;
    let csv = trainer::sample_evals_to_csv(&dataset, &evals);
    let csv_path = a.out.join("per_sample.csv");
    std::fs::write(&csv_path, &csv)?;

    let n = evals.len();
    let mean = |f: fn(&trainer::SampleEval) -> f64| {
        if n == 0 { f64::NAN } else { evals.iter().map(f).sum::<f64>() / n as f64 }
    };
    let summary = json!({
        "n": n,
        "model": model_cfg.kind.as_str(),
        "pearson_mean": mean(|e| e.pearson),
        "deg_mean": mean(|e| e.deg),
        "deg_k": cfg.deg_k.min(dataset.g()),
    });
    let sum_path = a.out.join("summary.json");
    std::fs::write(&sum_path, serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// Per-sample metric CSV from `eval`: sample,drug_id,cell_id,pearson,deg.
fn read_metric_csv(path: &Path, metric: &str) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow!("{}: empty csv", path.display()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let col = cols
        .iter()
        .position(|c| *c == metric)
        .ok_or_else(|| anyhow!("{}: no '{metric}' column in {header}", path.display()))?;
    let (di, ci) = (
        cols.iter().position(|c| *c == "drug_id").unwrap_or(1),
        cols.iter().position(|c| *c == "cell_id").unwrap_or(2),
    );
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() <= col.max(di).max(ci) {
            bail!("{}: line {} has too few fields", path.display(), ln + 2);
        }
        let v: f64 = fields[col]
            .parse()
            .with_context(|| format!("{}: line {} bad {metric}", path.display(), ln + 2))?;
        rows.push((format!("{}|{}", fields[di], fields[ci]), v));
    }
    Ok(rows)
}

fn cmd_bootstrap(a: BootstrapArgs) -> Result<()> {
    let ra = read_metric_csv(&a.a, &a.metric)?;
    let rb = read_metric_csv(&a.b, &a.metric)?;
    if ra.len() != rb.len() {
        bail!("sample count mismatch: {} has {}, {} has {}", a.a.display(), ra.len(), a.b.display(), rb.len());
    }
    for ((ka, _), (kb, _)) in ra.iter().zip(&rb) {
        if ka != kb {
            bail!("sample mismatch: '{ka}' vs '{kb}' (bootstrap pairs by row)");
        }
    }
    let va: Vec<f64> = ra.iter().map(|r| r.1).collect();
    let vb: Vec<f64> = rb.iter().map(|r| r.1).collect();
    let report = metrics::paired_bootstrap(&va, &vb, a.iters, a.seed)?;
    let doc = json!({
        "n": va.len(),
        "metric": a.metric,
        "iters": a.iters,
        "seed": a.seed,
        "mean_a": va.iter().sum::<f64>() / va.len() as f64,
        "mean_b": vb.iter().sum::<f64>() / vb.len() as f64,
        "mean_diff": report.mean_diff,
        "ci95": [report.ci95.0, report.ci95.1],
        "p_one_sided": report.p_one_sided,
    });
    write_or_print(a.out.as_ref(), &serde_json::to_string_pretty(&doc)?)
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let scope = parse_scope(&a.scope)?;
    let (graph, dataset) = load_world(&a.data)?;
    let prototype = model_config_for(
        ModelKind::Gat, &graph, dataset.g(), a.seed, a.embed, a.enc_hidden,
        a.delta_hidden, a.heads, a.dropout, scope,
    );
    let mut train = TrainConfig::new(ModelKind::Gat, a.seed);
    train.lr = a.lr;
    train.batch_size = a.batch;
    train.epochs = a.epochs;
    train.fanouts = a.fanouts.clone();
    train.deg_k = a.deg_k;
    let cfg = MatrixConfig {
        prototype,
        train,
        train_fraction: a.frac,
        bootstrap_iters: a.iters,
    };
    let rows = ablate::run_matrix(&graph, &dataset, &cfg, &a.out)?;
    let path = a.out.join("results.csv");
    ablate::write_matrix(&path, &rows)?;
    println!("{}", path.display());
    for r in &rows {
        println!(
            "{},{},{}: deg {:.4} p_vs_mlp {:.4}",
            r.model.as_str(),
            r.split.as_str(),
            r.ablation.as_str(),
            r.deg_mean,
            r.p_vs_mlp
        );
    }
    Ok(())
}

fn cmd_attn(a: AttnArgs) -> Result<()> {
    let (graph, _) = load_world(&a.data)?;
    let (model_cfg, store) = load_model(&a.ckpt)?;
    match a.drug {
        Some(drug) => {
            let export = attn::khop_reasoning_subgraph(
                &graph, &model_cfg, &store, &drug, a.k, a.top_m, &a.fanouts, a.seed,
            )?;
            write_or_print(a.out.as_ref(), &serde_json::to_string_pretty(&export)?)
        }
        None => {
            let n = graph.ids(NodeType::Drug).len() as u32;
            let drugs: Vec<u32> = (0..n).collect();
            let records =
                attn::records_for_drugs(&graph, &model_cfg, &store, &drugs, &a.fanouts, a.seed)?;
            let csv = attn::aggregate_csv(&records, NodeType::Drug)?;
            write_or_print(a.out.as_ref(), &csv)
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => cmd_synth(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Attn(a) => cmd_attn(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // single machine-parseable line; chained causes joined inline
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}
