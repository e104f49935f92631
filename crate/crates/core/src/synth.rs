//! Synthetic benchmark with a planted graph-mediated mechanism: expression
//! deltas are a function of a drug's target proteins, which are recoverable
//! from the graph's edges but deliberately absent from drug input features.

use crate::chem::{parse_smiles, scaffold_key, ChemError, ScaffoldKey};
use crate::dataset::{Dataset, DatasetError, PerturbationSample};
use crate::graph::{
    EdgeRecord, FeatureMatrix, GraphError, HeteroGraph, NodeRecord, NodeType,
};
use crate::rng::stream;
use ndarray::{Array1, Array2};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Ring-system templates realizing the scaffold families. Decorations are
/// acyclic, so scaffold extraction maps every member back to its template.
pub const SCAFFOLD_TEMPLATES: [&str; 30] = [
    "c1ccccc1",             // benzene
    "C1CCCCC1",             // cyclohexane
    "c1ccncc1",             // pyridine
    "c1cncnc1",             // pyrimidine
    "c1cnccn1",             // pyrazine
    "c1ccnnc1",             // pyridazine
    "c1ccoc1",              // furan
    "c1ccsc1",              // thiophene
    "c1cc[nH]c1",           // pyrrole
    "c1c[nH]cn1",           // imidazole
    "c1cscn1",              // thiazole
    "c1ocnc1",              // oxazole
    "C1CCCC1",              // cyclopentane
    "C1CCCCCC1",            // cycloheptane
    "C1CCNCC1",             // piperidine
    "C1CCOCC1",             // oxane
    "C1CCSCC1",             // thiane
    "C1CNCCN1",             // piperazine
    "C1COCCN1",             // morpholine
    "C1CCNC1",              // pyrrolidine
    "C1CCOC1",              // oxolane
    "c1ccc2ccccc2c1",       // naphthalene
    "c1ccc2ncccc2c1",       // quinoline
    "c1ccc2[nH]ccc2c1",     // indole
    "c1ccc2c(c1)OCO2",      // benzodioxole
    "c1ccc2cc3ccccc3cc2c1", // anthracene
    "C1CC2CCC1C2",          // norbornane
    "c1ccc(cc1)c1ccccc1",   // biphenyl
    "c1ccc(cc1)Cc1ccccc1",  // diphenylmethane
    "c1ccc(cc1)Oc1ccccc1",  // diphenyl ether
];

const FAMILY_TERMINALS: [&str; 4] = ["", "O", "N", "F"];

/// Decoration variants per family; a variant fixes both the side-chain
/// length and the member's binding subset within the family pool.
const CHAIN_VARIANTS: usize = 4;
const FAMILY_POOL: usize = 3;
const SIMILAR_PEERS: usize = 2;
const DRUG_MODALITIES: u32 = 2;
const DRUG_MODALITY_DIM: u32 = 32;
const PATHWAY_SCALE: f32 = 0.02;
const BASELINE_SCALE: f32 = 0.3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("parameter out of domain: {0}")]
    ParamDomain(String),
    #[error("unknown id '{0}'")]
    UnknownId(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    BadTruth {
        path: String,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_drugs: usize,
    pub n_proteins: usize,
    pub n_pathways: usize,
    pub n_cells: usize,
    pub g: usize,
    pub min_targets: usize,
    pub max_targets: usize,
    pub scaffold_families: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_drugs: 300,
            n_proteins: 100,
            n_pathways: 20,
            n_cells: 3,
            g: 64,
            min_targets: 1,
            max_targets: 3,
            scaffold_families: 30,
            noise_sd: 0.1,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::ParamDomain(m));
        if self.n_drugs == 0
            || self.n_proteins == 0
            || self.n_pathways == 0
            || self.n_cells == 0
            || self.g == 0
        {
            return bad("all counts must be positive".into());
        }
        if self.min_targets == 0 || self.min_targets > self.max_targets {
            return bad(format!(
                "targets per drug must satisfy 1 <= min <= max, got [{}, {}]",
                self.min_targets, self.max_targets
            ));
        }
        if self.max_targets > self.n_proteins {
            return bad(format!(
                "max_targets {} exceeds n_proteins {}",
                self.max_targets, self.n_proteins
            ));
        }
        if self.scaffold_families == 0 || self.scaffold_families > self.n_drugs {
            return bad(format!(
                "scaffold_families must be in [1, n_drugs], got {}",
                self.scaffold_families
            ));
        }
        if self.scaffold_families > SCAFFOLD_TEMPLATES.len() {
            return bad(format!(
                "scaffold_families {} exceeds the {} built-in templates",
                self.scaffold_families,
                SCAFFOLD_TEMPLATES.len()
            ));
        }
        if self.scaffold_families > self.n_proteins {
            return bad(format!(
                "need at least one private protein per family, got {} families for {} proteins",
                self.scaffold_families, self.n_proteins
            ));
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return bad(format!("noise_sd must be finite and >= 0, got {}", self.noise_sd));
        }
        Ok(())
    }
}

/// Everything needed to replay the generative process, written to
/// truth.json so oracles can score models without peeking at the graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthState {
    pub params: SynthParams,
    pub drug_ids: Vec<String>,
    pub cell_ids: Vec<String>,
    pub family_of: Vec<usize>,
    pub targets_of: Vec<Vec<u32>>,
    pub pathway_of: Vec<u32>,
    pub protein_sig: Vec<Vec<f32>>,
    pub pathway_mod: Vec<Vec<f32>>,
    pub cell_mask: Vec<Vec<f32>>,
    pub cell_baseline: Vec<Vec<f32>>,
}

impl SynthState {
    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let io = |source| SynthError::Io {
            path: path.display().to_string(),
            source,
        };
        let json = serde_json::to_string_pretty(self).map_err(|e| SynthError::BadTruth {
            path: path.display().to_string(),
            source: e,
        })?;
        std::fs::write(path, json).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| SynthError::BadTruth {
            path: path.display().to_string(),
            source,
        })
    }

    fn drug_index(&self, id: &str) -> Result<usize, SynthError> {
        self.drug_ids
            .iter()
            .position(|d| d == id)
            .ok_or_else(|| SynthError::UnknownId(id.to_string()))
    }

    fn cell_index(&self, id: &str) -> Result<usize, SynthError> {
        self.cell_ids
            .iter()
            .position(|c| c == id)
            .ok_or_else(|| SynthError::UnknownId(id.to_string()))
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Vec<Vec<f32>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| normal(rng) as f32 * scale).collect())
        .collect()
}

/// Remove the per-gene mean across rows. With centered signatures the
/// population-average delta is zero, so "predict the grand mean" earns
/// nothing and models only score through the planted mechanism.
fn center_columns(m: &mut [Vec<f32>]) {
    if m.is_empty() {
        return;
    }
    let cols = m[0].len();
    for j in 0..cols {
        let mean: f32 = m.iter().map(|r| r[j]).sum::<f32>() / m.len() as f32;
        for r in m.iter_mut() {
            r[j] -= mean;
        }
    }
}

/// Contiguous protein block privately owned by one family; targets are
/// drawn from it so families never share targets.
fn family_block(f: usize, families: usize, n_proteins: usize) -> std::ops::Range<usize> {
    let lo = f * n_proteins / families;
    let hi = (f + 1) * n_proteins / families;
    lo..hi
}

pub fn member_smiles(family: usize, member_rank: usize) -> String {
    let chain = "C".repeat(1 + member_rank % CHAIN_VARIANTS);
    let terminal = FAMILY_TERMINALS[family % FAMILY_TERMINALS.len()];
    format!("{}{}{}", SCAFFOLD_TEMPLATES[family], chain, terminal)
}

/// Draw the latent generative state. Everything downstream (features,
/// edges, observations, oracle) is a pure function of this.
pub fn plant(params: &SynthParams) -> Result<SynthState, SynthError> {
    params.validate()?;
    let fams = params.scaffold_families;
    let drug_ids: Vec<String> = (0..params.n_drugs).map(|i| format!("d{i}")).collect();
    let cell_ids: Vec<String> = (0..params.n_cells).map(|i| format!("c{i}")).collect();
    let family_of: Vec<usize> = (0..params.n_drugs).map(|i| i % fams).collect();

    // each family owns a small pool inside its private block; drugs draw
    // individual subsets, so family identity narrows the targets down but
    // never fully determines them
    let mut family_pool: Vec<Vec<u32>> = Vec::with_capacity(fams);
    for f in 0..fams {
        let block = family_block(f, fams, params.n_proteins);
        let block_len = block.len();
        let mut rng = stream(params.seed, "synth-pool", &[f as u64]);
        let size = FAMILY_POOL.max(params.max_targets).min(block_len);
        let mut picks: Vec<u32> = index_sample(&mut rng, block_len, size)
            .into_iter()
            .map(|i| (block.start + i) as u32)
            .collect();
        picks.sort_unstable();
        family_pool.push(picks);
    }
    // structure-activity coupling: members of a family come in a few
    // decoration variants (chain lengths), and each variant binds one fixed
    // subset of the family pool. Analog series behave like analog series.
    let variant_targets: Vec<Vec<Vec<u32>>> = (0..fams)
        .map(|f| {
            let pool = &family_pool[f];
            let mut rng = stream(params.seed, "synth-targets", &[f as u64]);
            let mut variants: Vec<Vec<u32>> = Vec::with_capacity(CHAIN_VARIANTS);
            for _ in 0..CHAIN_VARIANTS {
                for attempt in 0..32 {
                    let mut n = rng.random_range(params.min_targets..=params.max_targets);
                    // proper subsets only: a variant spanning the whole pool
                    // would cancel against the centered signatures
                    if n >= pool.len() && pool.len() >= 2 {
                        n = pool.len() - 1;
                    }
                    let n = n.min(pool.len());
                    let mut picks: Vec<u32> = index_sample(&mut rng, pool.len(), n)
                        .into_iter()
                        .map(|i| pool[i])
                        .collect();
                    picks.sort_unstable();
                    if attempt == 31 || !variants.contains(&picks) {
                        variants.push(picks);
                        break;
                    }
                }
            }
            variants
        })
        .collect();
    let mut member_rank = vec![0usize; fams];
    let targets_of: Vec<Vec<u32>> = family_of
        .iter()
        .map(|&f| {
            let rank = member_rank[f];
            member_rank[f] += 1;
            variant_targets[f][rank % CHAIN_VARIANTS].clone()
        })
        .collect();

    let pathway_of: Vec<u32> = (0..params.n_proteins)
        .map(|p| (p % params.n_pathways) as u32)
        .collect();

    let mut rng = stream(params.seed, "synth-protein-sig", &[]);
    let mut protein_sig = normal_matrix(&mut rng, params.n_proteins, params.g, 1.0);
    center_columns(&mut protein_sig);
    // center again inside each pool: any average over drugs of any family
    // then has near-zero expected delta, so no model can score by predicting
    // a grand-mean expression shift
    for pool in &family_pool {
        for j in 0..params.g {
            let mean: f32 =
                pool.iter().map(|&p| protein_sig[p as usize][j]).sum::<f32>() / pool.len() as f32;
            for &p in pool {
                protein_sig[p as usize][j] -= mean;
            }
        }
    }
    let mut rng = stream(params.seed, "synth-pathway-mod", &[]);
    let mut pathway_mod = normal_matrix(&mut rng, params.n_pathways, params.g, PATHWAY_SCALE);
    center_columns(&mut pathway_mod);

    let mut rng = stream(params.seed, "synth-cells", &[]);
    let cell_mask: Vec<Vec<f32>> = (0..params.n_cells)
        .map(|_| {
            (0..params.g)
                .map(|_| rng.random_range(0.8..1.2) as f32)
                .collect()
        })
        .collect();
    let cell_baseline = normal_matrix(&mut rng, params.n_cells, params.g, BASELINE_SCALE);

    Ok(SynthState {
        params: params.clone(),
        drug_ids,
        cell_ids,
        family_of,
        targets_of,
        pathway_of,
        protein_sig,
        pathway_mod,
        cell_mask,
        cell_baseline,
    })
}

fn planted_delta(state: &SynthState, drug: usize, cell: usize) -> Array1<f32> {
    let g = state.params.g;
    let mask = &state.cell_mask[cell];
    let mut delta = Array1::<f32>::zeros(g);
    for &p in &state.targets_of[drug] {
        let sig = &state.protein_sig[p as usize];
        let modifier = &state.pathway_mod[state.pathway_of[p as usize] as usize];
        for j in 0..g {
            delta[j] += sig[j] * mask[j] + modifier[j];
        }
    }
    delta
}

/// The noiseless planted delta for one (drug, cell) pair.
pub fn oracle_delta(state: &SynthState, drug_id: &str, cell_id: &str) -> Result<Array1<f32>, SynthError> {
    let d = state.drug_index(drug_id)?;
    let c = state.cell_index(cell_id)?;
    Ok(planted_delta(state, d, c))
}

/// Hashed counts of atom and bond environments. Every family produces
/// non-degenerate values here, so encoders trained on one family subset see
/// in-distribution inputs from the others.
fn structural_fingerprint(smiles: &str) -> Vec<f32> {
    let dim = DRUG_MODALITY_DIM as usize;
    let mut fp = vec![0f32; dim];
    let Ok(mol) = parse_smiles(smiles) else {
        return fp;
    };
    let bump = |fp: &mut Vec<f32>, key: u64| {
        let mut h = key.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 29;
        fp[(h % dim as u64) as usize] += 1.0;
    };
    for (i, a) in mol.atoms.iter().enumerate() {
        let key = a.element.as_bytes()[0] as u64
            | (a.aromatic as u64) << 8
            | (a.ring as u64) << 9
            | (mol.degree(i) as u64) << 10;
        bump(&mut fp, key);
    }
    for b in &mol.bonds {
        let key = 1 << 40
            | (b.order as u64) << 8
            | (b.ring as u64) << 10
            | ((mol.atoms[b.a].element.as_bytes()[0] ^ mol.atoms[b.b].element.as_bytes()[0])
                as u64)
                << 16;
        bump(&mut fp, key);
    }
    for v in &mut fp {
        *v = (1.0 + *v).ln();
    }
    fp
}

fn build_drug_features(state: &SynthState) -> Array2<f32> {
    let n = state.params.n_drugs;
    let width = (DRUG_MODALITIES * DRUG_MODALITY_DIM) as usize;
    let half = DRUG_MODALITY_DIM as usize;
    let mut rng = stream(state.params.seed, "synth-drug-feats", &[]);
    let mut x = Array2::<f32>::zeros((n, width));
    // dense sign codes instead of one-hots: every dimension has the same
    // statistics across families, so encoders see in-distribution inputs
    // even for held-out scaffolds
    let codes: Vec<Vec<f32>> = (0..state.params.scaffold_families)
        .map(|f| {
            let mut c = stream(state.params.seed, "synth-family-code", &[f as u64]);
            (0..half)
                .map(|_| if c.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let mut member_rank = vec![0usize; state.params.scaffold_families];
    for d in 0..n {
        for j in 0..width {
            x[[d, j]] = normal(&mut rng) as f32 * 0.005;
        }
        let f = state.family_of[d];
        for (j, v) in codes[f].iter().enumerate() {
            x[[d, j]] += v;
        }
        let fp = structural_fingerprint(&member_smiles(f, member_rank[f]));
        member_rank[f] += 1;
        for (j, v) in fp.iter().enumerate() {
            x[[d, half + j]] += v;
        }
    }
    x
}

fn build_graph(state: &SynthState) -> Result<HeteroGraph, SynthError> {
    let p = &state.params;
    let mut nodes = Vec::new();
    let mut member_rank = vec![0usize; p.scaffold_families];
    for (d, id) in state.drug_ids.iter().enumerate() {
        let f = state.family_of[d];
        let smiles = member_smiles(f, member_rank[f]);
        member_rank[f] += 1;
        nodes.push(NodeRecord {
            id: id.clone(),
            node_type: NodeType::Drug,
            name: format!("synthetic drug {d} (family {f})"),
            smiles: Some(smiles),
        });
    }
    for i in 0..p.n_proteins {
        nodes.push(NodeRecord {
            id: format!("p{i}"),
            node_type: NodeType::GeneProtein,
            name: format!("synthetic protein {i}"),
            smiles: None,
        });
    }
    for i in 0..p.n_pathways {
        nodes.push(NodeRecord {
            id: format!("w{i}"),
            node_type: NodeType::Pathway,
            name: format!("synthetic pathway {i}"),
            smiles: None,
        });
    }
    for (c, id) in state.cell_ids.iter().enumerate() {
        nodes.push(NodeRecord {
            id: id.clone(),
            node_type: NodeType::Cell,
            name: format!("synthetic cell line {c}"),
            smiles: None,
        });
    }

    let mut edges = Vec::new();
    for (d, targets) in state.targets_of.iter().enumerate() {
        for &t in targets {
            edges.push(EdgeRecord {
                src_id: state.drug_ids[d].clone(),
                relation: "targets".into(),
                dst_id: format!("p{t}"),
            });
        }
    }
    for (pr, &w) in state.pathway_of.iter().enumerate() {
        edges.push(EdgeRecord {
            src_id: format!("p{pr}"),
            relation: "in_pathway".into(),
            dst_id: format!("w{w}"),
        });
    }
    // same-family similarity edges; no graph path from them to targets,
    // they exist to give attention a semantically empty alternative
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); p.scaffold_families];
    for (d, &f) in state.family_of.iter().enumerate() {
        members[f].push(d);
    }
    for (d, &f) in state.family_of.iter().enumerate() {
        let peers: Vec<usize> = members[f].iter().copied().filter(|&m| m != d).collect();
        let n = peers.len().min(SIMILAR_PEERS);
        if n == 0 {
            continue;
        }
        let mut rng = stream(p.seed, "synth-similar", &[d as u64]);
        for i in index_sample(&mut rng, peers.len(), n) {
            edges.push(EdgeRecord {
                src_id: state.drug_ids[d].clone(),
                relation: "similar_to".into(),
                dst_id: state.drug_ids[peers[i]].clone(),
            });
        }
    }

    let sig = Array2::from_shape_fn((p.n_proteins, p.g), |(i, j)| state.protein_sig[i][j]);
    let pmod = Array2::from_shape_fn((p.n_pathways, p.g), |(i, j)| state.pathway_mod[i][j]);
    let base = Array2::from_shape_fn((p.n_cells, p.g), |(i, j)| state.cell_baseline[i][j]);
    let features = std::collections::HashMap::from([
        (
            NodeType::Drug,
            FeatureMatrix::new(
                NodeType::Drug,
                DRUG_MODALITIES,
                DRUG_MODALITY_DIM,
                build_drug_features(state),
            ),
        ),
        (
            NodeType::GeneProtein,
            FeatureMatrix::new(NodeType::GeneProtein, 1, p.g as u32, sig),
        ),
        (
            NodeType::Pathway,
            FeatureMatrix::new(NodeType::Pathway, 1, p.g as u32, pmod),
        ),
        (
            NodeType::Cell,
            FeatureMatrix::new(NodeType::Cell, 1, p.g as u32, base),
        ),
    ]);

    Ok(HeteroGraph::from_parts(nodes, &edges, features)?)
}

fn build_dataset(state: &SynthState) -> Result<Dataset, SynthError> {
    let p = &state.params;
    let n_samples = p.n_drugs * p.n_cells;
    let mut samples = Vec::with_capacity(n_samples);
    let mut observed = Array2::<f32>::zeros((n_samples, p.g));
    let mut rng = stream(p.seed, "synth-noise", &[]);
    let mut row = 0usize;
    for d in 0..p.n_drugs {
        for c in 0..p.n_cells {
            let delta = planted_delta(state, d, c);
            for j in 0..p.g {
                let noise = normal(&mut rng) as f32 * p.noise_sd as f32;
                observed[[row, j]] = state.cell_baseline[c][j] + delta[j] + noise;
            }
            samples.push(PerturbationSample {
                drug_id: state.drug_ids[d].clone(),
                cell_id: state.cell_ids[c].clone(),
                row,
            });
            row += 1;
        }
    }
    let baselines = Array2::from_shape_fn((p.n_cells, p.g), |(i, j)| state.cell_baseline[i][j]);
    Ok(Dataset::new(
        samples,
        observed,
        state.cell_ids.clone(),
        baselines,
    )?)
}

/// Generate the benchmark in memory.
pub fn generate(params: &SynthParams) -> Result<(HeteroGraph, Dataset, SynthState), SynthError> {
    let state = plant(params)?;
    let graph = build_graph(&state)?;
    let dataset = build_dataset(&state)?;
    dataset.validate_against(&graph)?;
    Ok((graph, dataset, state))
}

/// Generate and write the graph, dataset, and truth.json under one dir.
pub fn generate_to_dir(
    params: &SynthParams,
    dir: &Path,
) -> Result<(HeteroGraph, Dataset, SynthState), SynthError> {
    let (graph, dataset, state) = generate(params)?;
    std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    graph.save(dir)?;
    dataset.save(dir)?;
    state.save(&dir.join("truth.json"))?;
    Ok((graph, dataset, state))
}

/// Chance-adjusted accuracy of a linear probe scoring (drug, protein)
/// pairs for "protein is a target of drug", trained and tested on disjoint
/// family halves. Pair representation: drug features ++ protein one-hot
/// ++ (with `use_edges`) the drug->protein incidence bit, which is the
/// whole trick: targets are readable from edges, not from input features.
pub fn target_probe_accuracy(
    graph: &HeteroGraph,
    state: &SynthState,
    use_edges: bool,
) -> Result<f64, SynthError> {
    let p = &state.params;
    let feats = graph
        .features(NodeType::Drug)
        .ok_or_else(|| SynthError::UnknownId("drug features".into()))?;
    let n = p.n_drugs;
    let f_width = feats.width();
    let width = f_width + p.n_proteins + if use_edges { 1 } else { 0 };

    let pair_row = |d: usize, pr: usize| {
        let mut row = vec![0.0f64; width];
        for j in 0..f_width {
            row[j] = feats.values[[d, j]] as f64;
        }
        row[f_width + pr] = 1.0;
        if use_edges && state.targets_of[d].contains(&(pr as u32)) {
            row[width - 1] = 1.0;
        }
        row
    };

    let holdout = p.scaffold_families / 2;
    let is_test = |d: usize| state.family_of[d] < holdout;
    let train_rows: Vec<usize> = (0..n).filter(|&d| !is_test(d)).collect();
    let test_rows: Vec<usize> = (0..n).filter(|&d| is_test(d)).collect();

    let mut xt = Array2::<f64>::zeros((train_rows.len() * p.n_proteins, width));
    let mut yt = Array2::<f64>::zeros((train_rows.len() * p.n_proteins, 1));
    for (i, &d) in train_rows.iter().enumerate() {
        for pr in 0..p.n_proteins {
            let r = i * p.n_proteins + pr;
            xt.row_mut(r).assign(&Array1::from(pair_row(d, pr)));
            if state.targets_of[d].contains(&(pr as u32)) {
                yt[[r, 0]] = 1.0;
            }
        }
    }
    let mut k = xt.t().dot(&xt);
    for i in 0..width {
        k[[i, i]] += 1e-3;
    }
    let w = cholesky_solve(&k, &xt.t().dot(&yt));

    let mut hits = 0.0f64;
    let mut total = 0.0f64;
    for &d in &test_rows {
        let scores: Vec<f64> = (0..p.n_proteins)
            .map(|pr| Array1::from(pair_row(d, pr)).dot(&w.column(0)))
            .collect();
        let truth = &state.targets_of[d];
        let mut order: Vec<usize> = (0..p.n_proteins).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let picked = &order[..truth.len()];
        hits += truth
            .iter()
            .filter(|&&t| picked.contains(&(t as usize)))
            .count() as f64;
        total += truth.len() as f64;
    }
    let accuracy = hits / total;
    let chance = total / (test_rows.len() as f64 * p.n_proteins as f64);
    Ok((accuracy - chance) / (1.0 - chance))
}

/// Solve K W = B for symmetric positive definite K.
fn cholesky_solve(k: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = k.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = k[[i, j]];
            for t in 0..j {
                s -= l[[i, t]] * l[[j, t]];
            }
            if i == j {
                l[[i, i]] = s.max(1e-12).sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    let m = b.ncols();
    let mut w = b.clone();
    for col in 0..m {
        for i in 0..n {
            let mut s = w[[i, col]];
            for t in 0..i {
                s -= l[[i, t]] * w[[t, col]];
            }
            w[[i, col]] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = w[[i, col]];
            for t in i + 1..n {
                s -= l[[t, i]] * w[[t, col]];
            }
            w[[i, col]] = s / l[[i, i]];
        }
    }
    w
}

/// Scaffold keys of the bare templates, in family order.
pub fn template_keys(families: usize) -> Result<Vec<ScaffoldKey>, SynthError> {
    (0..families)
        .map(|f| Ok(scaffold_key(SCAFFOLD_TEMPLATES[f])?))
        .collect()
}
