//! Heterogeneous graph storage: typed nodes, typed directed edges with
//! per-type CSR adjacency (forward and reverse), and per-type feature
//! matrices loaded from NDF1 files.
//!
//! Node ids are strings in the input tables and are mapped to dense
//! per-type indices in first-seen order. Duplicate (multigraph) edges are
//! kept. The graph is immutable after construction.

use crate::ndf::{self, NdfMatrix};
use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    Drug,
    GeneProtein,
    Disease,
    BiologicalProcess,
    MolecularFunction,
    CellularComponent,
    Pathway,
    Cell,
}

impl NodeType {
    pub const ALL: [NodeType; 8] = [
        NodeType::Drug,
        NodeType::GeneProtein,
        NodeType::Disease,
        NodeType::BiologicalProcess,
        NodeType::MolecularFunction,
        NodeType::CellularComponent,
        NodeType::Pathway,
        NodeType::Cell,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NodeType::Drug => "drug",
            NodeType::GeneProtein => "gene_protein",
            NodeType::Disease => "disease",
            NodeType::BiologicalProcess => "biological_process",
            NodeType::MolecularFunction => "molecular_function",
            NodeType::CellularComponent => "cellular_component",
            NodeType::Pathway => "pathway",
            NodeType::Cell => "cell",
        }
    }

    pub fn parse(label: &str) -> Option<NodeType> {
        NodeType::ALL.iter().copied().find(|t| t.as_str() == label)
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A typed relation: edges of this type run src_type --relation--> dst_type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeType {
    pub src_type: NodeType,
    pub relation: String,
    pub dst_type: NodeType,
}

impl EdgeType {
    pub fn new(src_type: NodeType, relation: &str, dst_type: NodeType) -> Self {
        EdgeType {
            src_type,
            relation: relation.to_string(),
            dst_type,
        }
    }

    /// Inverse of Display: "src:relation:dst". The relation may itself
    /// contain colons; the node types anchor both ends.
    pub fn parse(s: &str) -> Option<EdgeType> {
        let (src, rest) = s.split_once(':')?;
        let (relation, dst) = rest.rsplit_once(':')?;
        if relation.is_empty() {
            return None;
        }
        Some(EdgeType::new(
            NodeType::parse(src)?,
            relation,
            NodeType::parse(dst)?,
        ))
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.src_type, self.relation, self.dst_type)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Per-type dense features, [n_nodes, modalities * dim].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub node_type: NodeType,
    pub modalities: u32,
    pub dim: u32,
    pub values: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(node_type: NodeType, modalities: u32, dim: u32, values: Array2<f32>) -> Self {
        assert_eq!(values.ncols(), (modalities * dim) as usize);
        FeatureMatrix {
            node_type,
            modalities,
            dim,
            values,
        }
    }

    pub fn width(&self) -> usize {
        (self.modalities * self.dim) as usize
    }

    fn from_ndf(node_type: NodeType, m: NdfMatrix) -> Self {
        FeatureMatrix {
            node_type,
            modalities: m.n_modalities,
            dim: m.dim,
            values: m.values,
        }
    }

    fn to_ndf(&self) -> NdfMatrix {
        NdfMatrix::new(self.modalities, self.dim, self.values.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csr {
    /// len = n_source_side + 1
    pub indptr: Vec<u32>,
    pub indices: Vec<u32>,
}

impl Csr {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[self.indptr[i] as usize..self.indptr[i + 1] as usize]
    }

    pub fn degree(&self, i: usize) -> usize {
        (self.indptr[i + 1] - self.indptr[i]) as usize
    }
}

#[derive(Debug, Clone)]
pub struct EdgeStore {
    pub forward: Csr,
    pub reverse: Csr,
    pub n_edges: usize,
}

#[derive(Debug, Clone)]
pub struct NodeRecord {
    pub id: String,
    pub node_type: NodeType,
    pub name: String,
    pub smiles: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EdgeRecord {
    pub src_id: String,
    pub relation: String,
    pub dst_id: String,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path} line {line}: unknown node type '{label}'")]
    UnknownNodeType {
        path: String,
        line: usize,
        label: String,
    },
    #[error("{path} line {line}: edge endpoint '{id}' is not a declared node")]
    DanglingEdgeEndpoint {
        path: String,
        line: usize,
        id: String,
    },
    #[error("feature matrix for {node_type}: expected {expect} rows, file has {got}")]
    FeatureShapeMismatch {
        node_type: NodeType,
        expect: usize,
        got: usize,
    },
    #[error("feature matrix for {node_type}: non-finite value at row {row}")]
    NonFiniteFeature { node_type: NodeType, row: usize },
    #[error("edge type {0} is not declared in this graph")]
    UnknownEdgeType(String),
    #[error("no feature file declared for node type {0}")]
    MissingFeatureFile(NodeType),
    #[error("{path} line {line}: expected {expect} tab-separated fields")]
    MalformedRow {
        path: String,
        line: usize,
        expect: usize,
    },
    #[error("{path} line {line}: duplicate node id '{id}'")]
    DuplicateNodeId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("{path} line {line}: empty relation string")]
    EmptyRelation { path: String, line: usize },
    #[error(transparent)]
    Ndf(#[from] ndf::NdfError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    BadManifest {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// JSON manifest tying the node/edge tables to per-type feature files.
/// Paths are resolved relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphManifest {
    pub nodes: String,
    pub edges: String,
    pub features: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
struct TypedNodes {
    ids: Vec<String>,
    names: Vec<String>,
    smiles: Vec<Option<String>>,
}

#[derive(Debug, Clone)]
pub struct HeteroGraph {
    nodes: IndexMap<NodeType, TypedNodes>,
    id_index: HashMap<String, (NodeType, u32)>,
    features: HashMap<NodeType, FeatureMatrix>,
    edges: IndexMap<EdgeType, EdgeStore>,
}

impl HeteroGraph {
    pub fn from_parts(
        nodes: Vec<NodeRecord>,
        edges: &[EdgeRecord],
        features: HashMap<NodeType, FeatureMatrix>,
    ) -> Result<HeteroGraph, GraphError> {
        let mut typed: IndexMap<NodeType, TypedNodes> = IndexMap::new();
        let mut id_index: HashMap<String, (NodeType, u32)> = HashMap::new();
        for (line, rec) in nodes.into_iter().enumerate() {
            if id_index.contains_key(&rec.id) {
                return Err(GraphError::DuplicateNodeId {
                    path: "<nodes>".into(),
                    line: line + 2,
                    id: rec.id,
                });
            }
            let slot = typed.entry(rec.node_type).or_insert_with(|| TypedNodes {
                ids: Vec::new(),
                names: Vec::new(),
                smiles: Vec::new(),
            });
            id_index.insert(rec.id.clone(), (rec.node_type, slot.ids.len() as u32));
            slot.ids.push(rec.id);
            slot.names.push(rec.name);
            slot.smiles.push(rec.smiles);
        }

        let mut pairs: IndexMap<EdgeType, Vec<(u32, u32)>> = IndexMap::new();
        for (line, e) in edges.iter().enumerate() {
            if e.relation.is_empty() {
                return Err(GraphError::EmptyRelation {
                    path: "<edges>".into(),
                    line: line + 1,
                });
            }
            let lookup = |id: &str| {
                id_index
                    .get(id)
                    .copied()
                    .ok_or_else(|| GraphError::DanglingEdgeEndpoint {
                        path: "<edges>".into(),
                        line: line + 1,
                        id: id.to_string(),
                    })
            };
            let (st, si) = lookup(&e.src_id)?;
            let (dt, di) = lookup(&e.dst_id)?;
            pairs
                .entry(EdgeType::new(st, &e.relation, dt))
                .or_default()
                .push((si, di));
        }

        let mut stores: IndexMap<EdgeType, EdgeStore> = IndexMap::new();
        for (et, mut p) in pairs {
            let n_src = typed.get(&et.src_type).map_or(0, |t| t.ids.len());
            let n_dst = typed.get(&et.dst_type).map_or(0, |t| t.ids.len());
            p.sort_unstable();
            let forward = build_csr(&p, n_src);
            let mut rev: Vec<(u32, u32)> = p.iter().map(|&(s, d)| (d, s)).collect();
            rev.sort_unstable();
            let reverse = build_csr(&rev, n_dst);
            stores.insert(
                et,
                EdgeStore {
                    forward,
                    reverse,
                    n_edges: p.len(),
                },
            );
        }

        let g = HeteroGraph {
            nodes: typed,
            id_index,
            features: HashMap::new(),
            edges: stores,
        };
        g.with_features(features)
    }

    /// Attach (or replace) feature matrices, validating shapes and finiteness.
    pub fn with_features(
        mut self,
        features: HashMap<NodeType, FeatureMatrix>,
    ) -> Result<HeteroGraph, GraphError> {
        for (&t, slot) in self.nodes.iter().map(|(t, s)| (t, s)) {
            let f = features
                .get(&t)
                .ok_or(GraphError::MissingFeatureFile(t))?;
            if f.values.nrows() != slot.ids.len() {
                return Err(GraphError::FeatureShapeMismatch {
                    node_type: t,
                    expect: slot.ids.len(),
                    got: f.values.nrows(),
                });
            }
            for (row, r) in f.values.rows().into_iter().enumerate() {
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(GraphError::NonFiniteFeature { node_type: t, row });
                }
            }
        }
        self.features = features;
        Ok(self)
    }

    /// Rebuild the graph with one edge type's pairs replaced (used by
    /// structural ablations). Endpoint indices must already be in range.
    pub fn with_replaced_edges(&self, etype: &EdgeType, mut pairs: Vec<(u32, u32)>) -> HeteroGraph {
        let n_src = self.node_count(etype.src_type);
        let n_dst = self.node_count(etype.dst_type);
        assert!(pairs.iter().all(|&(s, d)| (s as usize) < n_src && (d as usize) < n_dst));
        pairs.sort_unstable();
        let forward = build_csr(&pairs, n_src);
        let mut rev: Vec<(u32, u32)> = pairs.iter().map(|&(s, d)| (d, s)).collect();
        rev.sort_unstable();
        let reverse = build_csr(&rev, n_dst);
        let mut edges = self.edges.clone();
        edges.insert(
            etype.clone(),
            EdgeStore {
                forward,
                reverse,
                n_edges: pairs.len(),
            },
        );
        HeteroGraph {
            nodes: self.nodes.clone(),
            id_index: self.id_index.clone(),
            features: self.features.clone(),
            edges,
        }
    }

    /// Rebuild with one node type's feature matrix replaced (used by the
    /// feature-randomization ablation). Revalidates shape and finiteness.
    pub fn with_replaced_features(
        &self,
        node_type: NodeType,
        f: FeatureMatrix,
    ) -> Result<HeteroGraph, GraphError> {
        let mut features = self.features.clone();
        features.insert(node_type, f);
        let g = HeteroGraph {
            nodes: self.nodes.clone(),
            id_index: self.id_index.clone(),
            features: HashMap::new(),
            edges: self.edges.clone(),
        };
        g.with_features(features)
    }

    pub fn node_count(&self, t: NodeType) -> usize {
        self.nodes.get(&t).map_or(0, |s| s.ids.len())
    }

    pub fn node_types(&self) -> impl Iterator<Item = NodeType> + '_ {
        self.nodes.keys().copied()
    }

    pub fn edge_types(&self) -> impl Iterator<Item = &EdgeType> {
        self.edges.keys()
    }

    pub fn edge_count(&self, et: &EdgeType) -> Result<usize, GraphError> {
        self.edges
            .get(et)
            .map(|s| s.n_edges)
            .ok_or_else(|| GraphError::UnknownEdgeType(et.to_string()))
    }

    pub fn edge_store(&self, et: &EdgeType) -> Result<&EdgeStore, GraphError> {
        self.edges
            .get(et)
            .ok_or_else(|| GraphError::UnknownEdgeType(et.to_string()))
    }

    /// Edge list of one type as (src, dst) pairs, sorted by (src, dst).
    pub fn edge_pairs(&self, et: &EdgeType) -> Result<Vec<(u32, u32)>, GraphError> {
        let store = self.edge_store(et)?;
        let mut out = Vec::with_capacity(store.n_edges);
        for s in 0..self.node_count(et.src_type) {
            for &d in store.forward.row(s) {
                out.push((s as u32, d));
            }
        }
        Ok(out)
    }

    /// Sorted, duplicate-preserving neighbor list. Panics if `index` is out
    /// of range for the node type on the queried side.
    pub fn neighbors(
        &self,
        node: (NodeType, u32),
        et: &EdgeType,
        dir: Direction,
    ) -> Result<&[u32], GraphError> {
        let store = self.edge_store(et)?;
        let (n, csr, side) = match dir {
            Direction::Forward => (self.node_count(et.src_type), &store.forward, et.src_type),
            Direction::Reverse => (self.node_count(et.dst_type), &store.reverse, et.dst_type),
        };
        assert_eq!(node.0, side, "node type does not match queried edge side");
        assert!((node.1 as usize) < n, "node index out of range");
        Ok(csr.row(node.1 as usize))
    }

    pub fn features(&self, t: NodeType) -> Option<&FeatureMatrix> {
        self.features.get(&t)
    }

    pub fn id_of(&self, t: NodeType, index: u32) -> &str {
        &self.nodes[&t].ids[index as usize]
    }

    pub fn name_of(&self, t: NodeType, index: u32) -> &str {
        &self.nodes[&t].names[index as usize]
    }

    pub fn smiles_of(&self, t: NodeType, index: u32) -> Option<&str> {
        self.nodes[&t].smiles[index as usize].as_deref()
    }

    pub fn index_of(&self, id: &str) -> Option<(NodeType, u32)> {
        self.id_index.get(id).copied()
    }

    pub fn ids(&self, t: NodeType) -> &[String] {
        self.nodes.get(&t).map_or(&[], |s| s.ids.as_slice())
    }

    pub fn validate(&self) -> ValidationReport {
        let mut node_counts = BTreeMap::new();
        for (t, slot) in &self.nodes {
            node_counts.insert(t.to_string(), slot.ids.len());
        }
        let mut edge_counts = BTreeMap::new();
        let mut degree_histograms = BTreeMap::new();
        for (et, store) in &self.edges {
            edge_counts.insert(et.to_string(), store.n_edges);
            let hist = |csr: &Csr| {
                let mut h: BTreeMap<usize, usize> = BTreeMap::new();
                for i in 0..csr.indptr.len() - 1 {
                    *h.entry(csr.degree(i)).or_insert(0) += 1;
                }
                h
            };
            degree_histograms.insert(
                et.to_string(),
                DegreeHistogram {
                    forward: hist(&store.forward),
                    reverse: hist(&store.reverse),
                },
            );
        }
        let nan_count = self
            .features
            .values()
            .map(|f| f.values.iter().filter(|v| !v.is_finite()).count())
            .sum();
        ValidationReport {
            node_counts,
            edge_counts,
            degree_histograms,
            feature_nan_count: nan_count,
        }
    }

    /// Write nodes.tsv, edges.tsv, per-type .ndf files, and manifest.json
    /// into `dir`. Loading the written manifest reproduces this graph with
    /// identical CSR arrays.
    pub fn save(&self, dir: &Path) -> Result<(), GraphError> {
        let io = |path: &Path, source| GraphError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;

        let mut nodes_tsv = String::from("node_id\tnode_type\tname\tsmiles\n");
        for (t, slot) in &self.nodes {
            for i in 0..slot.ids.len() {
                nodes_tsv.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    slot.ids[i],
                    t,
                    slot.names[i],
                    slot.smiles[i].as_deref().unwrap_or("")
                ));
            }
        }
        let nodes_path = dir.join("nodes.tsv");
        std::fs::write(&nodes_path, nodes_tsv).map_err(|e| io(&nodes_path, e))?;

        let mut edges_tsv = String::new();
        for (et, _) in &self.edges {
            for (s, d) in self.edge_pairs(et)? {
                edges_tsv.push_str(&format!(
                    "{}\t{}\t{}\n",
                    self.id_of(et.src_type, s),
                    et.relation,
                    self.id_of(et.dst_type, d)
                ));
            }
        }
        let edges_path = dir.join("edges.tsv");
        std::fs::write(&edges_path, edges_tsv).map_err(|e| io(&edges_path, e))?;

        let mut feature_paths = BTreeMap::new();
        for (t, _) in &self.nodes {
            let f = &self.features[t];
            let fname = format!("features_{}.ndf", t);
            ndf::write(&dir.join(&fname), &f.to_ndf())?;
            feature_paths.insert(t.to_string(), fname);
        }

        let manifest = GraphManifest {
            nodes: "nodes.tsv".into(),
            edges: "edges.tsv".into(),
            features: feature_paths,
        };
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&manifest_path, json).map_err(|e| io(&manifest_path, e))
    }
}


#[derive(Debug, Serialize)]
pub struct DegreeHistogram {
    pub forward: BTreeMap<usize, usize>,
    pub reverse: BTreeMap<usize, usize>,
}

#[derive(Debug, Serialize)]
pub struct ValidationReport {
    pub node_counts: BTreeMap<String, usize>,
    pub edge_counts: BTreeMap<String, usize>,
    pub degree_histograms: BTreeMap<String, DegreeHistogram>,
    pub feature_nan_count: usize,
}

fn build_csr(sorted_pairs: &[(u32, u32)], n_src: usize) -> Csr {
    let mut indptr = vec![0u32; n_src + 1];
    for &(s, _) in sorted_pairs {
        indptr[s as usize + 1] += 1;
    }
    for i in 0..n_src {
        indptr[i + 1] += indptr[i];
    }
    let indices = sorted_pairs.iter().map(|&(_, d)| d).collect();
    Csr { indptr, indices }
}

/// Load a graph from a manifest.json path (tables and feature files are
/// resolved relative to the manifest's directory).
pub fn load(manifest_path: &Path) -> Result<HeteroGraph, GraphError> {
    let io = |path: &Path, source| GraphError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = std::fs::read_to_string(manifest_path).map_err(|e| io(manifest_path, e))?;
    let manifest: GraphManifest =
        serde_json::from_str(&text).map_err(|e| GraphError::BadManifest {
            path: manifest_path.display().to_string(),
            source: e,
        })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let nodes_path = base.join(&manifest.nodes);
    let nodes = parse_nodes_tsv(&nodes_path)?;
    let edges_path = base.join(&manifest.edges);
    let edges = parse_edges_tsv(&edges_path)?;

    let mut features = HashMap::new();
    for (label, rel) in &manifest.features {
        let t = NodeType::parse(label).ok_or_else(|| GraphError::UnknownNodeType {
            path: manifest_path.display().to_string(),
            line: 0,
            label: label.clone(),
        })?;
        let m = ndf::read(&base.join(rel))?;
        features.insert(t, FeatureMatrix::from_ndf(t, m));
    }

    build_graph(nodes, &edges, features)
}

pub fn build_graph(
    nodes: Vec<NodeRecord>,
    edges: &[EdgeRecord],
    features: HashMap<NodeType, FeatureMatrix>,
) -> Result<HeteroGraph, GraphError> {
    HeteroGraph::from_parts(nodes, edges, features)
}

fn parse_nodes_tsv(path: &Path) -> Result<Vec<NodeRecord>, GraphError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| GraphError::Io {
        path: display.clone(),
        source: e,
    })?;
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue; // header
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(GraphError::MalformedRow {
                path: display,
                line: i + 1,
                expect: 4,
            });
        }
        let node_type =
            NodeType::parse(fields[1]).ok_or_else(|| GraphError::UnknownNodeType {
                path: display.clone(),
                line: i + 1,
                label: fields[1].to_string(),
            })?;
        if seen.insert(fields[0].to_string(), i).is_some() {
            return Err(GraphError::DuplicateNodeId {
                path: display,
                line: i + 1,
                id: fields[0].to_string(),
            });
        }
        out.push(NodeRecord {
            id: fields[0].to_string(),
            node_type,
            name: fields[2].to_string(),
            smiles: if fields[3].is_empty() {
                None
            } else {
                Some(fields[3].to_string())
            },
        });
    }
    Ok(out)
}

fn parse_edges_tsv(path: &Path) -> Result<Vec<EdgeRecord>, GraphError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| GraphError::Io {
        path: display.clone(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(GraphError::MalformedRow {
                path: display,
                line: i + 1,
                expect: 3,
            });
        }
        if fields[1].is_empty() {
            return Err(GraphError::EmptyRelation {
                path: display,
                line: i + 1,
            });
        }
        out.push(EdgeRecord {
            src_id: fields[0].to_string(),
            relation: fields[1].to_string(),
            dst_id: fields[2].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn node(id: &str, t: NodeType) -> NodeRecord {
        NodeRecord {
            id: id.into(),
            node_type: t,
            name: id.to_uppercase(),
            smiles: if t == NodeType::Drug { Some("CCO".into()) } else { None },
        }
    }

    fn edge(s: &str, r: &str, d: &str) -> EdgeRecord {
        EdgeRecord {
            src_id: s.into(),
            relation: r.into(),
            dst_id: d.into(),
        }
    }

    fn feats(t: NodeType, n: usize, w: usize) -> (NodeType, FeatureMatrix) {
        let values = Array2::from_shape_fn((n, w), |(i, j)| (i * w + j) as f32 * 0.1);
        (t, FeatureMatrix::new(t, 1, w as u32, values))
    }

    fn two_drug_graph() -> HeteroGraph {
        let nodes = vec![
            node("d0", NodeType::Drug),
            node("d1", NodeType::Drug),
            node("p0", NodeType::GeneProtein),
        ];
        let edges = vec![edge("d0", "targets", "p0"), edge("d1", "targets", "p0")];
        let features = [
            feats(NodeType::Drug, 2, 4),
            feats(NodeType::GeneProtein, 1, 4),
        ]
        .into_iter()
        .collect();
        HeteroGraph::from_parts(nodes, &edges, features).unwrap()
    }

    fn targets() -> EdgeType {
        EdgeType::new(NodeType::Drug, "targets", NodeType::GeneProtein)
    }

    #[test]
    fn two_drugs_one_protein_reverse_degree() {
        let g = two_drug_graph();
        let nb = g
            .neighbors((NodeType::GeneProtein, 0), &targets(), Direction::Reverse)
            .unwrap();
        assert_eq!(nb, &[0, 1]);
        assert_eq!(g.edge_count(&targets()).unwrap(), 2);
    }

    #[test]
    fn empty_edge_table_gives_zero_degrees() {
        let nodes = vec![
            node("d0", NodeType::Drug),
            node("p0", NodeType::GeneProtein),
            node("c0", NodeType::Cell),
        ];
        let features = [
            feats(NodeType::Drug, 1, 2),
            feats(NodeType::GeneProtein, 1, 2),
            feats(NodeType::Cell, 1, 2),
        ]
        .into_iter()
        .collect();
        let g = HeteroGraph::from_parts(nodes, &[], features).unwrap();
        assert_eq!(g.edge_types().count(), 0);
        let report = g.validate();
        assert_eq!(report.node_counts["drug"], 1);
        assert!(report.edge_counts.is_empty());
        assert_eq!(report.feature_nan_count, 0);
    }

    #[test]
    fn dangling_endpoint_names_the_id() {
        let nodes = vec![node("d0", NodeType::Drug), node("p0", NodeType::GeneProtein)];
        let edges = vec![edge("d9", "targets", "p0")];
        let err = HeteroGraph::from_parts(nodes, &edges, HashMap::new()).unwrap_err();
        match err {
            GraphError::DanglingEdgeEndpoint { id, .. } => assert_eq!(id, "d9"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn nan_feature_rejected() {
        let nodes = vec![node("d0", NodeType::Drug)];
        let mut values = Array2::zeros((1, 4));
        values[[0, 2]] = f32::NAN;
        let features = [(
            NodeType::Drug,
            FeatureMatrix::new(NodeType::Drug, 1, 4, values),
        )]
        .into_iter()
        .collect();
        let err = HeteroGraph::from_parts(nodes, &[], features).unwrap_err();
        assert!(matches!(
            err,
            GraphError::NonFiniteFeature {
                node_type: NodeType::Drug,
                row: 0
            }
        ));
    }

    #[test]
    fn feature_row_count_must_match() {
        let nodes = vec![node("d0", NodeType::Drug), node("d1", NodeType::Drug)];
        let features = [feats(NodeType::Drug, 3, 4)].into_iter().collect();
        let err = HeteroGraph::from_parts(nodes, &[], features).unwrap_err();
        assert!(matches!(
            err,
            GraphError::FeatureShapeMismatch {
                expect: 2,
                got: 3,
                ..
            }
        ));
    }

    #[test]
    fn unknown_edge_type_errors() {
        let g = two_drug_graph();
        let et = EdgeType::new(NodeType::Drug, "interacts", NodeType::Drug);
        assert!(matches!(
            g.neighbors((NodeType::Drug, 0), &et, Direction::Forward),
            Err(GraphError::UnknownEdgeType(_))
        ));
    }

    #[test]
    fn multigraph_duplicates_are_kept() {
        let nodes = vec![node("d0", NodeType::Drug), node("p0", NodeType::GeneProtein)];
        let edges = vec![
            edge("d0", "targets", "p0"),
            edge("d0", "targets", "p0"),
        ];
        let features = [
            feats(NodeType::Drug, 1, 2),
            feats(NodeType::GeneProtein, 1, 2),
        ]
        .into_iter()
        .collect();
        let g = HeteroGraph::from_parts(nodes, &edges, features).unwrap();
        let nb = g
            .neighbors((NodeType::Drug, 0), &targets(), Direction::Forward)
            .unwrap();
        assert_eq!(nb, &[0, 0]);
    }

    #[test]
    fn forward_reverse_describe_same_edges() {
        use rand::Rng;
        let mut rng = crate::rng::stream(7, "graph-test", &[]);
        let n_drug = 13;
        let n_prot = 9;
        let nodes: Vec<NodeRecord> = (0..n_drug)
            .map(|i| node(&format!("d{i}"), NodeType::Drug))
            .chain((0..n_prot).map(|i| node(&format!("p{i}"), NodeType::GeneProtein)))
            .collect();
        let edges: Vec<EdgeRecord> = (0..40)
            .map(|_| {
                edge(
                    &format!("d{}", rng.random_range(0..n_drug)),
                    "targets",
                    &format!("p{}", rng.random_range(0..n_prot)),
                )
            })
            .collect();
        let features = [
            feats(NodeType::Drug, n_drug, 2),
            feats(NodeType::GeneProtein, n_prot, 2),
        ]
        .into_iter()
        .collect();
        let g = HeteroGraph::from_parts(nodes, &edges, features).unwrap();
        let store = g.edge_store(&targets()).unwrap();
        assert_eq!(store.forward.indices.len(), 40);
        assert_eq!(store.reverse.indices.len(), 40);
        for s in 0..n_drug {
            for &d in store.forward.row(s) {
                assert!(store.reverse.row(d as usize).contains(&(s as u32)));
            }
        }
        for d in 0..n_prot {
            for &s in store.reverse.row(d) {
                assert!(store.forward.row(s as usize).contains(&(d as u32)));
            }
        }
    }

    #[test]
    fn save_then_load_round_trips_csr_exactly() {
        let g = two_drug_graph();
        let dir = tempfile::tempdir().unwrap();
        g.save(dir.path()).unwrap();
        let g2 = load(&dir.path().join("manifest.json")).unwrap();
        for et in g.edge_types() {
            let a = g.edge_store(et).unwrap();
            let b = g2.edge_store(et).unwrap();
            assert_eq!(a.forward, b.forward);
            assert_eq!(a.reverse, b.reverse);
        }
        for t in g.node_types() {
            assert_eq!(g.ids(t), g2.ids(t));
            assert_eq!(g.features(t).unwrap().values, g2.features(t).unwrap().values);
        }
        assert_eq!(g.smiles_of(NodeType::Drug, 1), Some("CCO"));
        assert_eq!(g2.smiles_of(NodeType::Drug, 1), Some("CCO"));
    }

    #[test]
    fn degree_sums_match_edge_count() {
        let g = two_drug_graph();
        let store = g.edge_store(&targets()).unwrap();
        let fwd_sum: usize = (0..g.node_count(NodeType::Drug))
            .map(|i| store.forward.degree(i))
            .sum();
        let rev_sum: usize = (0..g.node_count(NodeType::GeneProtein))
            .map(|i| store.reverse.degree(i))
            .sum();
        assert_eq!(fwd_sum, store.n_edges);
        assert_eq!(rev_sum, store.n_edges);
    }
}
