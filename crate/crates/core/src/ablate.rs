//! Graph ablation transforms and the model x split x ablation experiment
//! matrix with paired bootstrap comparisons against the MLP baseline.

use crate::chem::{self, ChemError};
use crate::dataset::Dataset;
use crate::graph::{GraphError, HeteroGraph, NodeType};
use crate::metrics::{paired_bootstrap, MetricsError};
use crate::model::{ModelConfig, ModelKind};
use crate::trainer::{
    self, evaluate_epoch, split_sample_indices, Ablation, SplitKind, TrainConfig, TrainError,
};
use rand::seq::SliceRandom;
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AblateError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Permute the destination endpoints within every edge type. Sources keep
/// their out-degrees, so connectivity statistics survive while the
/// specific relationships are destroyed.
pub fn shuffle_edges(g: &HeteroGraph, seed: u64) -> HeteroGraph {
    let mut out = g.clone();
    let etypes: Vec<_> = g.edge_types().cloned().collect();
    for et in &etypes {
        let pairs = g.edge_pairs(et).expect("known edge type");
        if pairs.len() < 2 {
            continue;
        }
        let mut rng = crate::rng::stream(seed, &format!("edge-shuffle|{et}"), &[]);
        let mut dsts: Vec<u32> = pairs.iter().map(|&(_, d)| d).collect();
        dsts.shuffle(&mut rng);
        let shuffled: Vec<(u32, u32)> = pairs
            .iter()
            .zip(&dsts)
            .map(|(&(s, _), &d)| (s, d))
            .collect();
        out = out.with_replaced_edges(et, shuffled);
    }
    out
}

/// Harsher variant: redraw every destination uniformly from the type's
/// node range instead of permuting, abandoning in-degree structure too.
pub fn rewire_edges(g: &HeteroGraph, seed: u64) -> HeteroGraph {
    let mut out = g.clone();
    let etypes: Vec<_> = g.edge_types().cloned().collect();
    for et in &etypes {
        let pairs = g.edge_pairs(et).expect("known edge type");
        let n_dst = g.node_count(et.dst_type) as u32;
        if pairs.is_empty() || n_dst == 0 {
            continue;
        }
        let mut rng = crate::rng::stream(seed, &format!("edge-rewire|{et}"), &[]);
        let rewired: Vec<(u32, u32)> = pairs
            .iter()
            .map(|&(s, _)| (s, rng.random_range(0..n_dst)))
            .collect();
        out = out.with_replaced_edges(et, rewired);
    }
    out
}

/// Replace the features of every node type outside `exclude` with i.i.d.
/// normal draws matched to that type's per-column mean and standard
/// deviation. Topology is untouched.
pub fn randomize_node_features(
    g: &HeteroGraph,
    exclude: &[NodeType],
    seed: u64,
) -> Result<HeteroGraph, GraphError> {
    let mut out = g.clone();
    for t in NodeType::ALL {
        if exclude.contains(&t) {
            continue;
        }
        let Some(f) = g.features(t) else { continue };
        let (n, w) = f.values.dim();
        if n == 0 {
            continue;
        }
        let mut rng = crate::rng::stream(seed, &format!("feature-randomize|{}", t.as_str()), &[]);
        let mut values = f.values.clone();
        for j in 0..w {
            let col = f.values.column(j);
            let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = col
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let std = var.sqrt();
            for i in 0..n {
                // Box-Muller; the u1 flip keeps ln away from zero
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random::<f64>();
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                values[[i, j]] = (mean + std * z) as f32;
            }
        }
        let fm = crate::graph::FeatureMatrix::new(t, f.modalities, f.dim, values);
        out = out.with_replaced_features(t, fm)?;
    }
    Ok(out)
}

pub fn apply_ablation(
    g: &HeteroGraph,
    ablation: Ablation,
    seed: u64,
) -> Result<HeteroGraph, GraphError> {
    match ablation {
        Ablation::None => Ok(g.clone()),
        Ablation::EdgeShuffle => Ok(shuffle_edges(g, seed)),
        Ablation::NodeRandomize => {
            randomize_node_features(g, &[NodeType::Drug, NodeType::Cell], seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub model: ModelKind,
    pub split: SplitKind,
    pub ablation: Ablation,
    pub pearson_mean: f64,
    pub deg_mean: f64,
    /// 95% CI of the paired DEG difference against the same-split MLP row.
    pub deg_ci_lo: f64,
    pub deg_ci_hi: f64,
    pub p_vs_mlp: f64,
}

pub fn matrix_to_csv(rows: &[MatrixRow]) -> String {
    let mut s =
        String::from("model,split,ablation,pearson_mean,deg_mean,deg_ci_lo,deg_ci_hi,p_vs_mlp\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.model.as_str(),
            r.split.as_str(),
            r.ablation.as_str(),
            r.pearson_mean,
            r.deg_mean,
            r.deg_ci_lo,
            r.deg_ci_hi,
            r.p_vs_mlp
        );
    }
    s
}

/// Shared hyperparameters for every matrix cell; `prototype` carries the
/// architecture dimensions and `train` everything else. The per-cell model
/// kind, split, and ablation are filled in by the runner.
#[derive(Debug, Clone)]
pub struct MatrixConfig {
    pub prototype: ModelConfig,
    pub train: TrainConfig,
    pub train_fraction: f64,
    pub bootstrap_iters: usize,
}

pub fn drug_smiles(graph: &HeteroGraph) -> Vec<(String, String)> {
    graph
        .ids(NodeType::Drug)
        .iter()
        .enumerate()
        .filter_map(|(i, id)| {
            graph
                .smiles_of(NodeType::Drug, i as u32)
                .map(|s| (id.clone(), s.to_string()))
        })
        .collect()
}

pub fn compute_split(
    graph: &HeteroGraph,
    kind: SplitKind,
    train_fraction: f64,
    seed: u64,
) -> Result<chem::SplitAssignment, ChemError> {
    match kind {
        SplitKind::Scaffold => chem::scaffold_split(&drug_smiles(graph), train_fraction, seed),
        SplitKind::Random => {
            chem::random_split(graph.ids(NodeType::Drug), train_fraction, seed)
        }
    }
}

/// Train and evaluate one cell; returns the row metrics together with the
/// per-sample DEG values needed for pairing.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    graph: &HeteroGraph,
    dataset: &Dataset,
    cfg: &MatrixConfig,
    kind: ModelKind,
    split: SplitKind,
    ablation: Ablation,
    train_idx: &[usize],
    test_idx: &[usize],
    out_dir: &Path,
) -> Result<(MatrixRow, Vec<f64>, Vec<f64>), AblateError> {
    let ab_seed = crate::rng::derive_labeled(cfg.train.seed, ablation.as_str(), &[]);
    let g_run = apply_ablation(graph, ablation, ab_seed)?;

    let mut model_cfg = cfg.prototype.clone();
    model_cfg.kind = kind;
    let mut train_cfg = cfg.train.clone();
    train_cfg.model = kind;
    train_cfg.split = split;
    train_cfg.ablation = ablation;

    let cell_dir = out_dir.join(format!(
        "{}_{}_{}",
        split.as_str(),
        kind.as_str(),
        ablation.as_str()
    ));
    let out = trainer::train(
        &g_run, dataset, &model_cfg, &train_cfg, train_idx, test_idx, &cell_dir,
    )?;
    let (_, best_store) = crate::model::load_model(&out.checkpoint)?;
    let evals = evaluate_epoch(
        &g_run, dataset, &model_cfg, &best_store, &train_cfg, test_idx, 0,
    )?;
    let pearsons: Vec<f64> = evals.iter().map(|e| e.pearson).collect();
    let degs: Vec<f64> = evals.iter().map(|e| e.deg).collect();
    let row = MatrixRow {
        model: kind,
        split,
        ablation,
        pearson_mean: pearsons.iter().sum::<f64>() / pearsons.len() as f64,
        deg_mean: degs.iter().sum::<f64>() / degs.len() as f64,
        deg_ci_lo: f64::NAN,
        deg_ci_hi: f64::NAN,
        p_vs_mlp: f64::NAN,
    };
    Ok((row, pearsons, degs))
}

/// The ten-condition matrix: three models per split plus the two GAT graph
/// ablations per split. Writes per-cell artifacts under `out_dir` and
/// returns rows in enumeration order.
pub fn run_matrix(
    graph: &HeteroGraph,
    dataset: &Dataset,
    cfg: &MatrixConfig,
    out_dir: &Path,
) -> Result<Vec<MatrixRow>, AblateError> {
    let mut rows = Vec::with_capacity(10);
    for split in [SplitKind::Scaffold, SplitKind::Random] {
        let assignment = compute_split(graph, split, cfg.train_fraction, cfg.train.seed)?;
        let (train_idx, test_idx) = split_sample_indices(dataset, &assignment);

        let conditions = [
            (ModelKind::Mlp, Ablation::None),
            (ModelKind::MlpTargets, Ablation::None),
            (ModelKind::Gat, Ablation::None),
            (ModelKind::Gat, Ablation::EdgeShuffle),
            (ModelKind::Gat, Ablation::NodeRandomize),
        ];
        let mut mlp_degs: Option<Vec<f64>> = None;
        for (kind, ablation) in conditions {
            let (mut row, _pearsons, degs) = run_cell(
                graph, dataset, cfg, kind, split, ablation, &train_idx, &test_idx, out_dir,
            )?;
            if kind == ModelKind::Mlp {
                mlp_degs = Some(degs.clone());
            }
            let baseline = mlp_degs.as_ref().expect("mlp runs first");
            let boot = paired_bootstrap(
                &degs,
                baseline,
                cfg.bootstrap_iters,
                crate::rng::derive_labeled(cfg.train.seed, "matrix-bootstrap", &[]),
            )?;
            row.deg_ci_lo = boot.ci95.0;
            row.deg_ci_hi = boot.ci95.1;
            row.p_vs_mlp = boot.p_one_sided;
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_matrix(path: &Path, rows: &[MatrixRow]) -> Result<(), AblateError> {
    std::fs::write(path, matrix_to_csv(rows)).map_err(|source| AblateError::Io {
        path: path.display().to_string(),
        source,
    })
}
