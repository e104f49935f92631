//! Training loop with per-epoch test evaluation and checkpoint selection
//! on the best mean DEG correlation (ties broken toward the earlier epoch).

use crate::dataset::Dataset;
use crate::graph::{Direction, EdgeType, GraphError, HeteroGraph, NodeType};
use crate::metrics::{deg_correlation, pearson, MetricsError};
use crate::model::{
    apply_bn_updates, gat_forward, init_params, mlp_forward, mlp_targets_forward, save_model,
    ForwardOut, ModelConfig, ModelError, ModelKind, RunCtx,
};
use crate::sampler::{batch_seed, make_batches, sample_neighbors, SampledSubgraph};
use crate::tensor::{AdamW, AdamWConfig, ParamStore, Segments, Tape, TensorError};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const DEFAULT_DEG_K: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Scaffold,
    Random,
}

impl SplitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Scaffold => "scaffold",
            SplitKind::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<SplitKind> {
        match s {
            "scaffold" => Some(SplitKind::Scaffold),
            "random" => Some(SplitKind::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    EdgeShuffle,
    NodeRandomize,
}

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::EdgeShuffle => "edge_shuffle",
            Ablation::NodeRandomize => "node_randomize",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        match s {
            "none" => Some(Ablation::None),
            "edge_shuffle" => Some(Ablation::EdgeShuffle),
            "node_randomize" => Some(Ablation::NodeRandomize),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub fanouts: Vec<usize>,
    pub seed: u64,
    pub split: SplitKind,
    pub ablation: Ablation,
    pub deg_k: usize,
}

impl TrainConfig {
    pub fn new(model: ModelKind, seed: u64) -> Self {
        TrainConfig {
            model,
            lr: 0.001,
            batch_size: 512,
            epochs: 20,
            fanouts: vec![20, 10],
            seed,
            split: SplitKind::Scaffold,
            ablation: Ablation::None,
            deg_k: DEFAULT_DEG_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_pearson: f64,
    pub test_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    /// Index into dataset.samples.
    pub sample: usize,
    pub pearson: f64,
    pub deg: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub history: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_test_deg: f64,
    pub checkpoint: PathBuf,
    pub history_csv: PathBuf,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the {side} split selects no samples")]
    EmptySplit { side: &'static str },
    #[error("loss became non-finite ({value}) at epoch {epoch}, batch {batch} ({batch_len} samples)")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        batch_len: usize,
        value: f64,
    },
    #[error("sample {index} references drug '{id}' that is not a drug node")]
    UnknownDrug { index: usize, id: String },
    #[error("sample {index} references cell '{id}' with no baseline row")]
    UnknownCell { index: usize, id: String },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Static per-sample lookups shared by every batch of a run.
struct BatchPlan<'a> {
    graph: &'a HeteroGraph,
    dataset: &'a Dataset,
    /// Graph index of each sample's drug node.
    drug_index: Vec<u32>,
    /// Baseline row of each sample's cell line.
    cell_row: Vec<usize>,
    /// The drug -> protein relation used for target pooling, if present.
    targets_etype: Option<EdgeType>,
}

impl<'a> BatchPlan<'a> {
    fn new(graph: &'a HeteroGraph, dataset: &'a Dataset) -> Result<Self, TrainError> {
        let mut drug_index = Vec::with_capacity(dataset.n_samples());
        let mut cell_row = Vec::with_capacity(dataset.n_samples());
        for (i, s) in dataset.samples.iter().enumerate() {
            match graph.index_of(&s.drug_id) {
                Some((NodeType::Drug, idx)) => drug_index.push(idx),
                _ => {
                    return Err(TrainError::UnknownDrug {
                        index: i,
                        id: s.drug_id.clone(),
                    })
                }
            }
            match dataset.cell_row(&s.cell_id) {
                Some(r) => cell_row.push(r),
                None => {
                    return Err(TrainError::UnknownCell {
                        index: i,
                        id: s.cell_id.clone(),
                    })
                }
            }
        }
        let targets_etype = graph
            .edge_types()
            .find(|et| et.src_type == NodeType::Drug && et.dst_type == NodeType::GeneProtein)
            .cloned();
        Ok(BatchPlan {
            graph,
            dataset,
            drug_index,
            cell_row,
            targets_etype,
        })
    }

    fn observed(&self, idxs: &[usize]) -> Array2<f32> {
        let g = self.dataset.g();
        let mut y = Array2::zeros((idxs.len(), g));
        for (r, &i) in idxs.iter().enumerate() {
            y.row_mut(r).assign(&self.dataset.observed.row(i));
        }
        y
    }

    fn baselines(&self, idxs: &[usize]) -> Array2<f32> {
        let g = self.dataset.g();
        let mut b = Array2::zeros((idxs.len(), g));
        for (r, &i) in idxs.iter().enumerate() {
            b.row_mut(r)
                .assign(&self.dataset.baselines.row(self.cell_row[i]));
        }
        b
    }

    fn drug_features(&self, idxs: &[usize]) -> Result<Array2<f32>, TrainError> {
        let feats = self
            .graph
            .features(NodeType::Drug)
            .ok_or(ModelError::MissingFeatures(NodeType::Drug))?;
        let mut x = Array2::zeros((idxs.len(), feats.width()));
        for (r, &i) in idxs.iter().enumerate() {
            x.row_mut(r)
                .assign(&feats.values.row(self.drug_index[i] as usize));
        }
        Ok(x)
    }

    /// Stacked target-protein feature rows plus one segment per sample;
    /// drugs without recorded targets contribute an empty segment.
    fn target_features(&self, idxs: &[usize]) -> Result<(Array2<f32>, Segments), TrainError> {
        let feats = self
            .graph
            .features(NodeType::GeneProtein)
            .ok_or(ModelError::MissingFeatures(NodeType::GeneProtein))?;
        let mut rows: Vec<u32> = Vec::new();
        let mut segments = Vec::with_capacity(idxs.len());
        for &i in idxs {
            let start = rows.len();
            if let Some(et) = &self.targets_etype {
                let nbrs = self.graph.neighbors(
                    (NodeType::Drug, self.drug_index[i]),
                    et,
                    Direction::Forward,
                )?;
                rows.extend_from_slice(nbrs);
            }
            segments.push((start, rows.len()));
        }
        let mut x = Array2::zeros((rows.len(), feats.width()));
        for (r, &p) in rows.iter().enumerate() {
            x.row_mut(r).assign(&feats.values.row(p as usize));
        }
        Ok((x, segments))
    }

    /// Unique seed drugs in first-appearance order and the per-sample map
    /// into that seed list.
    fn gat_seeds(&self, idxs: &[usize]) -> (Vec<u32>, Vec<usize>) {
        let mut seeds: Vec<u32> = Vec::new();
        let mut rows = Vec::with_capacity(idxs.len());
        for &i in idxs {
            let d = self.drug_index[i];
            let row = match seeds.iter().position(|&s| s == d) {
                Some(p) => p,
                None => {
                    seeds.push(d);
                    seeds.len() - 1
                }
            };
            rows.push(row);
        }
        (seeds, rows)
    }

    fn forward(
        &self,
        tape: &mut Tape<f32>,
        store: &ParamStore<f32>,
        cfg: &ModelConfig,
        fanouts: &[usize],
        idxs: &[usize],
        sg_seed: u64,
        ctx: &mut RunCtx<f32>,
    ) -> Result<ForwardOut, TrainError> {
        let baseline = self.baselines(idxs);
        match cfg.kind {
            ModelKind::Mlp => {
                let x = self.drug_features(idxs)?;
                Ok(mlp_forward(tape, store, cfg, &x, &baseline, ctx)?)
            }
            ModelKind::MlpTargets => {
                let x = self.drug_features(idxs)?;
                let (xt, segments) = self.target_features(idxs)?;
                Ok(mlp_targets_forward(
                    tape, store, cfg, &x, &xt, &segments, &baseline, ctx,
                )?)
            }
            ModelKind::Gat => {
                let (seeds, rows) = self.gat_seeds(idxs);
                let sg: SampledSubgraph =
                    sample_neighbors(self.graph, NodeType::Drug, &seeds, fanouts, sg_seed);
                Ok(gat_forward(
                    tape, store, cfg, self.graph, &sg, &rows, &baseline, ctx, false,
                )?)
            }
        }
    }
}

fn chunk_indices(idxs: &[usize], size: usize) -> Vec<Vec<usize>> {
    idxs.chunks(size.max(1)).map(|c| c.to_vec()).collect()
}

/// Per-sample test metrics under eval-mode batch norm and no dropout.
/// The `pass` tag keeps neighbor sampling deterministic per call site.
pub fn evaluate_epoch(
    graph: &HeteroGraph,
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    test_idx: &[usize],
    pass: u64,
) -> Result<Vec<SampleEval>, TrainError> {
    let plan = BatchPlan::new(graph, dataset)?;
    let k = cfg.deg_k.min(dataset.g());
    let mut out = Vec::with_capacity(test_idx.len());
    for (b, batch) in chunk_indices(test_idx, cfg.batch_size).iter().enumerate() {
        let sg_seed = crate::rng::derive_labeled(cfg.seed, "eval-sample", &[pass, b as u64]);
        let mut ctx = RunCtx::eval();
        let mut tape: Tape<f32> = Tape::new();
        let fwd = plan.forward(&mut tape, store, model_cfg, &cfg.fanouts, batch, sg_seed, &mut ctx)?;
        let yhat = tape.value(fwd.yhat).clone();
        let y = plan.observed(batch);
        let base = plan.baselines(batch);
        for (r, &i) in batch.iter().enumerate() {
            let pred: Vec<f64> = yhat.row(r).iter().map(|&v| v as f64).collect();
            let obs: Vec<f64> = y.row(r).iter().map(|&v| v as f64).collect();
            let bl: Vec<f64> = base.row(r).iter().map(|&v| v as f64).collect();
            out.push(SampleEval {
                sample: i,
                pearson: pearson(&pred, &obs)?,
                deg: deg_correlation(&pred, &obs, &bl, k)?,
            });
        }
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Train on the given sample indices, evaluating on the test indices after
/// every epoch. Writes `model.ckpt` (best-DEG parameters) and `history.csv`
/// under `out_dir` and returns the run summary.
pub fn train(
    graph: &HeteroGraph,
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_idx: &[usize],
    test_idx: &[usize],
    out_dir: &Path,
) -> Result<TrainOutput, TrainError> {
    if train_idx.is_empty() {
        return Err(TrainError::EmptySplit { side: "train" });
    }
    if test_idx.is_empty() {
        return Err(TrainError::EmptySplit { side: "test" });
    }
    let plan = BatchPlan::new(graph, dataset)?;
    let mut store = init_params(model_cfg)?;
    let mut opt: AdamW<f32> = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    });

    let mut history: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let shuffle_seed = crate::rng::derive_labeled(cfg.seed, "shuffle", &[epoch as u64]);
        let batches = make_batches(train_idx.len(), cfg.batch_size, shuffle_seed);
        let mut sq_sum = 0.0f64;
        for (b, batch_rows) in batches.iter().enumerate() {
            let idxs: Vec<usize> = batch_rows.iter().map(|&r| train_idx[r]).collect();
            let sg_seed = batch_seed(cfg.seed, epoch as u64, b as u64);
            let mut ctx = RunCtx::train(cfg.seed, epoch as u64, b as u64);
            let mut tape: Tape<f32> = Tape::new();
            let fwd = plan.forward(
                &mut tape, &store, model_cfg, &cfg.fanouts, &idxs, sg_seed, &mut ctx,
            )?;
            let y = tape.constant(plan.observed(&idxs));
            let loss = tape.mse_loss(fwd.yhat, y)?;
            let lv = tape.value(loss)[[0, 0]] as f64;
            if !lv.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    batch_len: idxs.len(),
                    value: lv,
                });
            }
            tape.backward(loss);
            let grads = tape.param_grads();
            opt.step(&mut store, &grads)?;
            apply_bn_updates(&mut store, &ctx.bn_updates);
            sq_sum += lv * idxs.len() as f64;
        }
        let train_mse = sq_sum / train_idx.len() as f64;

        let evals = evaluate_epoch(graph, dataset, model_cfg, &store, cfg, test_idx, epoch as u64)?;
        let test_pearson = mean(evals.iter().map(|e| e.pearson));
        let test_deg = mean(evals.iter().map(|e| e.deg));
        let better = match &best {
            Some((_, deg, _)) => test_deg > *deg,
            None => true,
        };
        if better {
            best = Some((epoch, test_deg, store.clone()));
        }
        history.push(EpochRow {
            epoch,
            train_mse,
            test_pearson,
            test_deg,
        });
    }

    let (best_epoch, best_test_deg, best_store) = match best {
        Some((e, d, s)) => (e, d, s),
        // zero-epoch runs checkpoint the untouched initialization
        None => (0, f64::NAN, store),
    };

    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let checkpoint = out_dir.join("model.ckpt");
    save_model(&checkpoint, model_cfg, &best_store)?;
    let history_csv = out_dir.join("history.csv");
    write_history(&history_csv, &history)?;

    Ok(TrainOutput {
        history,
        best_epoch,
        best_test_deg,
        checkpoint,
        history_csv,
    })
}

pub fn history_to_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from("epoch,train_mse,test_pearson,test_deg\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_mse, r.test_pearson, r.test_deg);
    }
    s
}

pub fn write_history(path: &Path, rows: &[EpochRow]) -> Result<(), TrainError> {
    std::fs::write(path, history_to_csv(rows)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn sample_evals_to_csv(dataset: &Dataset, rows: &[SampleEval]) -> String {
    let mut s = String::from("sample,drug_id,cell_id,pearson,deg\n");
    for r in rows {
        let rec = &dataset.samples[r.sample];
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.sample, rec.drug_id, rec.cell_id, r.pearson, r.deg
        );
    }
    s
}

/// Map a drug-level split assignment onto dataset sample indices.
pub fn split_sample_indices(
    dataset: &Dataset,
    assignment: &crate::chem::SplitAssignment,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if assignment.is_train(&s.drug_id) {
            train.push(i);
        } else if assignment.is_test(&s.drug_id) {
            test.push(i);
        }
    }
    (train, test)
}
