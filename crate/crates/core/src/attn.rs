//! Attention capture post-processing: flat per-edge records, source-type
//! mass aggregation, and the per-drug k-hop reasoning subgraph export.

use crate::graph::{EdgeType, HeteroGraph, NodeType};
use crate::model::{gat_forward, ForwardOut, ModelConfig, ModelError, ModelKind, RunCtx};
use crate::sampler::sample_neighbors;
use crate::tensor::{ParamStore, Tape};
use ndarray::Array2;
use serde::Serialize;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("no attention records match the query")]
    EmptyRecords,
    #[error("'{id}' is not a drug node")]
    UnknownDrug { id: String },
    #[error("k must be between 1 and {layers}, got {k}")]
    BadK { k: usize, layers: usize },
    #[error("attention tracing needs a gat checkpoint, got {0}")]
    NotAGat(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One post-softmax attention weight. `destination` is the node being
/// updated (attention flows into it); `source` sent the message.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub edge_type: EdgeType,
    pub head: usize,
    pub source: (NodeType, u32),
    pub destination: (NodeType, u32),
    pub weight: f32,
}

/// Flatten the captures of a forward pass into one record per
/// (edge, layer, head).
pub fn record_attention(tape: &Tape<f32>, out: &ForwardOut) -> Vec<AttentionRecord> {
    let mut records = Vec::new();
    for cap in &out.captures {
        let alpha = tape.value(cap.alpha);
        for (e, (&recv, &send)) in cap.receivers.iter().zip(&cap.senders).enumerate() {
            for head in 0..alpha.ncols() {
                records.push(AttentionRecord {
                    layer: cap.layer,
                    edge_type: cap.edge_type.clone(),
                    head,
                    source: (cap.edge_type.dst_type, send),
                    destination: (cap.edge_type.src_type, recv),
                    weight: alpha[[e, head]],
                });
            }
        }
    }
    records
}

/// Share of attention mass each source node type contributes to
/// destinations of the given type, over all layers and heads.
pub fn aggregate_by_source_type(
    records: &[AttentionRecord],
    destination_type: NodeType,
) -> Result<BTreeMap<NodeType, f64>, AttnError> {
    let mut mass: BTreeMap<NodeType, f64> = BTreeMap::new();
    let mut total = 0.0f64;
    for r in records {
        if r.destination.0 != destination_type {
            continue;
        }
        *mass.entry(r.source.0).or_insert(0.0) += r.weight as f64;
        total += r.weight as f64;
    }
    if total <= 0.0 {
        return Err(AttnError::EmptyRecords);
    }
    for v in mass.values_mut() {
        *v /= total;
    }
    Ok(mass)
}

/// Same aggregation, reported separately per layer.
pub fn aggregate_by_source_type_per_layer(
    records: &[AttentionRecord],
    destination_type: NodeType,
) -> Result<BTreeMap<usize, BTreeMap<NodeType, f64>>, AttnError> {
    let mut layers: BTreeMap<usize, Vec<AttentionRecord>> = BTreeMap::new();
    for r in records {
        layers.entry(r.layer).or_default().push(r.clone());
    }
    let mut out = BTreeMap::new();
    for (layer, rs) in layers {
        if let Ok(dist) = aggregate_by_source_type(&rs, destination_type) {
            out.insert(layer, dist);
        }
    }
    if out.is_empty() {
        return Err(AttnError::EmptyRecords);
    }
    Ok(out)
}

/// CSV for the distributions: overall rows first, then per-layer rows.
pub fn aggregate_csv(
    records: &[AttentionRecord],
    destination_type: NodeType,
) -> Result<String, AttnError> {
    let overall = aggregate_by_source_type(records, destination_type)?;
    let layered = aggregate_by_source_type_per_layer(records, destination_type)?;
    let mut s = String::from("scope,layer,source_type,mass\n");
    for (t, m) in &overall {
        let _ = writeln!(s, "overall,,{t},{m}");
    }
    for (layer, dist) in &layered {
        for (t, m) in dist {
            let _ = writeln!(s, "layer,{layer},{t},{m}");
        }
    }
    Ok(s)
}

/// Attention records from eval-mode forwards seeded at the given drugs
/// (chunked for memory).
pub fn records_for_drugs(
    graph: &HeteroGraph,
    cfg: &ModelConfig,
    store: &ParamStore<f32>,
    drugs: &[u32],
    fanouts: &[usize],
    seed: u64,
) -> Result<Vec<AttentionRecord>, AttnError> {
    if cfg.kind != ModelKind::Gat {
        return Err(AttnError::NotAGat(cfg.kind.as_str()));
    }
    let mut records = Vec::new();
    for (i, chunk) in drugs.chunks(256).enumerate() {
        let sg = sample_neighbors(graph, NodeType::Drug, chunk, fanouts, seed ^ i as u64);
        let rows: Vec<usize> = (0..chunk.len()).collect();
        let mut tape: Tape<f32> = Tape::new();
        let mut ctx = RunCtx::eval();
        let baseline = Array2::zeros((chunk.len(), cfg.g));
        let out = gat_forward(
            &mut tape, store, cfg, graph, &sg, &rows, &baseline, &mut ctx, true,
        )?;
        records.extend(record_attention(&tape, &out));
    }
    Ok(records)
}

/// Source-type attention mass into drug destinations over the same sweep.
pub fn source_type_mass_for_drugs(
    graph: &HeteroGraph,
    cfg: &ModelConfig,
    store: &ParamStore<f32>,
    drugs: &[u32],
    fanouts: &[usize],
    seed: u64,
) -> Result<BTreeMap<NodeType, f64>, AttnError> {
    let records = records_for_drugs(graph, cfg, store, drugs, fanouts, seed)?;
    aggregate_by_source_type(&records, NodeType::Drug)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportNode {
    pub id: String,
    pub node_type: String,
    pub name: String,
}

/// An exported edge keeps the graph's declared orientation (src --relation-->
/// dst) even though attention flows dst -> src during message passing.
#[derive(Debug, Clone, Serialize)]
pub struct ExportEdge {
    pub src: String,
    pub dst: String,
    pub relation: String,
    pub hop: usize,
    pub alpha: Vec<f32>,
    pub alpha_mean: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct HopPie {
    pub hop: usize,
    pub source_type_distribution: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReasoningExport {
    pub drug: String,
    pub k: usize,
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<ExportEdge>,
    pub source_type_distribution: BTreeMap<String, f64>,
    pub hops: Vec<HopPie>,
}

struct CapturedEdge {
    layer: usize,
    edge_type: EdgeType,
    receiver: u32,
    sender: u32,
    alpha: Vec<f32>,
    mean: f32,
}

fn pie(edges: &[&CapturedEdge]) -> BTreeMap<String, f64> {
    let mut mass: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    for e in edges {
        *mass
            .entry(e.edge_type.dst_type.as_str().to_string())
            .or_insert(0.0) += e.mean as f64;
        total += e.mean as f64;
    }
    if total > 0.0 {
        for v in mass.values_mut() {
            *v /= total;
        }
    }
    mass
}

/// Expand the drug's attention neighborhood hop by hop, keeping per node
/// the top_m in-edges by head-mean weight, and report source-type pies.
#[allow(clippy::too_many_arguments)]
pub fn khop_reasoning_subgraph(
    graph: &HeteroGraph,
    cfg: &ModelConfig,
    store: &ParamStore<f32>,
    drug_id: &str,
    k: usize,
    top_m: usize,
    fanouts: &[usize],
    seed: u64,
) -> Result<ReasoningExport, AttnError> {
    if cfg.kind != ModelKind::Gat {
        return Err(AttnError::NotAGat(cfg.kind.as_str()));
    }
    let n_layers = fanouts.len();
    if k == 0 || k > n_layers {
        return Err(AttnError::BadK { k, layers: n_layers });
    }
    let di = match graph.index_of(drug_id) {
        Some((NodeType::Drug, i)) => i,
        _ => {
            return Err(AttnError::UnknownDrug {
                id: drug_id.to_string(),
            })
        }
    };

    let sg = sample_neighbors(graph, NodeType::Drug, &[di], fanouts, seed);
    let mut tape: Tape<f32> = Tape::new();
    let mut ctx = RunCtx::eval();
    let baseline = Array2::zeros((1, cfg.g));
    let out = gat_forward(
        &mut tape, store, cfg, graph, &sg, &[0], &baseline, &mut ctx, true,
    )?;

    let mut captured: Vec<CapturedEdge> = Vec::new();
    for cap in &out.captures {
        let alpha = tape.value(cap.alpha);
        for (e, (&recv, &send)) in cap.receivers.iter().zip(&cap.senders).enumerate() {
            let row: Vec<f32> = (0..alpha.ncols()).map(|h| alpha[[e, h]]).collect();
            let mean = row.iter().sum::<f32>() / row.len() as f32;
            captured.push(CapturedEdge {
                layer: cap.layer,
                edge_type: cap.edge_type.clone(),
                receiver: recv,
                sender: send,
                alpha: row,
                mean,
            });
        }
    }

    let mut frontier: Vec<(NodeType, u32)> = vec![(NodeType::Drug, di)];
    let mut seen: HashSet<(NodeType, u32)> = frontier.iter().copied().collect();
    let mut kept: Vec<(usize, usize)> = Vec::new(); // (hop, captured index)
    for hop in 1..=k {
        let layer = n_layers + 1 - hop; // the last layer feeds the seeds
        let mut next: Vec<(NodeType, u32)> = Vec::new();
        for &(nt, ni) in &frontier {
            let mut incoming: Vec<usize> = captured
                .iter()
                .enumerate()
                .filter(|(_, c)| {
                    c.layer == layer && c.edge_type.src_type == nt && c.receiver == ni
                })
                .map(|(i, _)| i)
                .collect();
            incoming.sort_by(|&a, &b| {
                captured[b]
                    .mean
                    .total_cmp(&captured[a].mean)
                    .then_with(|| captured[a].edge_type.cmp(&captured[b].edge_type))
                    .then_with(|| captured[a].sender.cmp(&captured[b].sender))
            });
            for &i in incoming.iter().take(top_m) {
                kept.push((hop, i));
                let src_node = (captured[i].edge_type.dst_type, captured[i].sender);
                if seen.insert(src_node) {
                    next.push(src_node);
                }
            }
        }
        frontier = next;
    }

    let mut node_order: Vec<(NodeType, u32)> = vec![(NodeType::Drug, di)];
    let mut node_seen: HashSet<(NodeType, u32)> = node_order.iter().copied().collect();
    let mut edges = Vec::with_capacity(kept.len());
    for &(hop, i) in &kept {
        let c = &captured[i];
        let recv_node = (c.edge_type.src_type, c.receiver);
        let send_node = (c.edge_type.dst_type, c.sender);
        for n in [recv_node, send_node] {
            if node_seen.insert(n) {
                node_order.push(n);
            }
        }
        edges.push(ExportEdge {
            src: graph.id_of(recv_node.0, recv_node.1).to_string(),
            dst: graph.id_of(send_node.0, send_node.1).to_string(),
            relation: c.edge_type.relation.clone(),
            hop,
            alpha: c.alpha.clone(),
            alpha_mean: c.mean,
        });
    }

    let nodes = node_order
        .iter()
        .map(|&(t, i)| ExportNode {
            id: graph.id_of(t, i).to_string(),
            node_type: t.as_str().to_string(),
            name: graph.name_of(t, i).to_string(),
        })
        .collect();
    let all_kept: Vec<&CapturedEdge> = kept.iter().map(|&(_, i)| &captured[i]).collect();
    let hops = (1..=k)
        .map(|hop| {
            let hop_edges: Vec<&CapturedEdge> = kept
                .iter()
                .filter(|&&(h, _)| h == hop)
                .map(|&(_, i)| &captured[i])
                .collect();
            HopPie {
                hop,
                source_type_distribution: pie(&hop_edges),
            }
        })
        .collect();

    Ok(ReasoningExport {
        drug: drug_id.to_string(),
        k,
        nodes,
        edges,
        source_type_distribution: pie(&all_kept),
        hops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeRecord, FeatureMatrix, NodeRecord};
    use crate::model::{init_params, AttentionScope};
    use std::collections::HashMap;

    fn node(id: &str, t: NodeType) -> NodeRecord {
        NodeRecord {
            id: id.into(),
            node_type: t,
            name: format!("{id}-name"),
            smiles: None,
        }
    }

    fn edge(src: &str, rel: &str, dst: &str) -> EdgeRecord {
        EdgeRecord {
            src_id: src.into(),
            relation: rel.into(),
            dst_id: dst.into(),
        }
    }

    fn feats(t: NodeType, n: usize, w: usize) -> (NodeType, FeatureMatrix) {
        let values = ndarray::Array2::from_shape_fn((n, w), |(i, j)| {
            0.2 + 0.31 * i as f32 - 0.11 * j as f32
        });
        (t, FeatureMatrix::new(t, 1, w as u32, values))
    }

    /// One drug fed by two proteins, each protein fed by one pathway.
    fn two_hop_graph() -> HeteroGraph {
        let nodes = vec![
            node("d0", NodeType::Drug),
            node("p0", NodeType::GeneProtein),
            node("p1", NodeType::GeneProtein),
            node("w0", NodeType::Pathway),
            node("w1", NodeType::Pathway),
        ];
        let edges = vec![
            edge("d0", "targets", "p0"),
            edge("d0", "targets", "p1"),
            edge("p0", "in_pathway", "w0"),
            edge("p1", "in_pathway", "w1"),
        ];
        let features = HashMap::from([
            feats(NodeType::Drug, 1, 3),
            feats(NodeType::GeneProtein, 2, 3),
            feats(NodeType::Pathway, 2, 2),
        ]);
        HeteroGraph::from_parts(nodes, &edges, features).unwrap()
    }

    fn gat_setup(graph: &HeteroGraph) -> (ModelConfig, ParamStore<f32>) {
        let mut cfg = ModelConfig::for_graph(ModelKind::Gat, graph, 4, 3);
        cfg.embed_dim = 8;
        cfg.enc_hidden = 6;
        cfg.delta_hidden = 6;
        cfg.heads = 2;
        cfg.attention_scope = AttentionScope::PerType;
        let store = init_params(&cfg).unwrap();
        (cfg, store)
    }

    fn forward_records(
        graph: &HeteroGraph,
        cfg: &ModelConfig,
        store: &ParamStore<f32>,
    ) -> Vec<AttentionRecord> {
        let sg = sample_neighbors(graph, NodeType::Drug, &[0], &[20, 10], 7);
        let mut tape: Tape<f32> = Tape::new();
        let mut ctx = RunCtx::eval();
        let baseline = Array2::zeros((1, cfg.g));
        let out = gat_forward(
            &mut tape, store, cfg, graph, &sg, &[0], &baseline, &mut ctx, true,
        )
        .unwrap();
        let n_edges: usize = sg.hops.iter().flatten().map(|h| h.pairs.len()).sum();
        let records = record_attention(&tape, &out);
        assert_eq!(records.len(), n_edges * cfg.heads);
        records
    }

    #[test]
    fn lone_in_edges_carry_unit_weight() {
        let nodes = vec![node("d0", NodeType::Drug), node("p0", NodeType::GeneProtein)];
        let edges = vec![edge("d0", "targets", "p0")];
        let features = HashMap::from([
            feats(NodeType::Drug, 1, 3),
            feats(NodeType::GeneProtein, 1, 3),
        ]);
        let graph = HeteroGraph::from_parts(nodes, &edges, features).unwrap();
        let (cfg, store) = gat_setup(&graph);
        for r in forward_records(&graph, &cfg, &store) {
            assert_eq!(r.weight, 1.0);
            assert_eq!(r.destination, (NodeType::Drug, 0));
            assert_eq!(r.source, (NodeType::GeneProtein, 0));
        }
    }

    #[test]
    fn per_destination_weights_normalize() {
        let graph = two_hop_graph();
        let (cfg, store) = gat_setup(&graph);
        let records = forward_records(&graph, &cfg, &store);
        let mut sums: HashMap<(usize, EdgeType, (NodeType, u32), usize), f32> = HashMap::new();
        for r in &records {
            *sums
                .entry((r.layer, r.edge_type.clone(), r.destination, r.head))
                .or_insert(0.0) += r.weight;
        }
        for ((layer, et, dst, head), s) in sums {
            assert!(
                (s - 1.0).abs() < 1e-6,
                "layer {layer} {et} dst {dst:?} head {head}: {s}"
            );
        }
    }

    #[test]
    fn aggregation_reads_off_hand_built_records() {
        let et_p = EdgeType::new(NodeType::Drug, "targets", NodeType::GeneProtein);
        let et_w = EdgeType::new(NodeType::Drug, "in", NodeType::Pathway);
        let mk = |et: &EdgeType, src_t: NodeType, w: f32| AttentionRecord {
            layer: 2,
            edge_type: et.clone(),
            head: 0,
            source: (src_t, 0),
            destination: (NodeType::Drug, 0),
            weight: w,
        };
        let records = vec![
            mk(&et_p, NodeType::GeneProtein, 0.75),
            mk(&et_w, NodeType::Pathway, 0.25),
        ];
        let dist = aggregate_by_source_type(&records, NodeType::Drug).unwrap();
        assert_eq!(dist[&NodeType::GeneProtein], 0.75);
        assert_eq!(dist[&NodeType::Pathway], 0.25);
        assert!((dist.values().sum::<f64>() - 1.0).abs() < 1e-9);

        // single source type collapses to all the mass
        let only_p = vec![mk(&et_p, NodeType::GeneProtein, 0.4)];
        let dist = aggregate_by_source_type(&only_p, NodeType::Drug).unwrap();
        assert_eq!(dist.len(), 1);
        assert_eq!(dist[&NodeType::GeneProtein], 1.0);

        assert!(matches!(
            aggregate_by_source_type(&records, NodeType::Cell),
            Err(AttnError::EmptyRecords)
        ));
    }

    #[test]
    fn full_pass_distribution_sums_to_one() {
        let graph = two_hop_graph();
        let (cfg, store) = gat_setup(&graph);
        let records = forward_records(&graph, &cfg, &store);
        let dist = aggregate_by_source_type(&records, NodeType::Drug).unwrap();
        assert!((dist.values().sum::<f64>() - 1.0).abs() < 1e-9);
        // the drug's only in-edges are protein targets
        assert_eq!(dist[&NodeType::GeneProtein], 1.0);
        let per_layer = aggregate_by_source_type_per_layer(&records, NodeType::Drug).unwrap();
        assert!(per_layer.contains_key(&1) && per_layer.contains_key(&2));
        let csv = aggregate_csv(&records, NodeType::Drug).unwrap();
        assert!(csv.starts_with("scope,layer,source_type,mass\n"));
        assert!(csv.contains("overall,,gene_protein,1"));
    }

    #[test]
    fn khop_export_grows_with_k_and_stays_in_graph() {
        let graph = two_hop_graph();
        let (cfg, store) = gat_setup(&graph);
        let e1 = khop_reasoning_subgraph(&graph, &cfg, &store, "d0", 1, 5, &[20, 10], 7).unwrap();
        let e2 = khop_reasoning_subgraph(&graph, &cfg, &store, "d0", 2, 5, &[20, 10], 7).unwrap();
        let ids = |e: &ReasoningExport| {
            e.nodes.iter().map(|n| n.id.clone()).collect::<std::collections::BTreeSet<_>>()
        };
        assert!(ids(&e1).is_subset(&ids(&e2)), "k=2 must contain k=1");
        assert_eq!(e1.source_type_distribution["gene_protein"], 1.0);
        assert_eq!(e1.hops.len(), 1);
        assert_eq!(e2.hops.len(), 2);
        assert_eq!(e2.hops[1].source_type_distribution["pathway"], 1.0);

        // every exported edge matches a declared graph edge
        for e in &e2.edges {
            let (st, si) = graph.index_of(&e.src).unwrap();
            let (dt, di) = graph.index_of(&e.dst).unwrap();
            let et = EdgeType::new(st, &e.relation, dt);
            let pairs = graph.edge_pairs(&et).unwrap();
            assert!(pairs.contains(&(si, di)), "{} -{}-> {}", e.src, e.relation, e.dst);
            assert_eq!(e.alpha.len(), cfg.heads);
        }
    }

    #[test]
    fn khop_top_m_limits_in_edges_per_node() {
        let graph = two_hop_graph();
        let (cfg, store) = gat_setup(&graph);
        let e = khop_reasoning_subgraph(&graph, &cfg, &store, "d0", 2, 1, &[20, 10], 7).unwrap();
        let mut per_src: HashMap<&str, usize> = HashMap::new();
        for edge in &e.edges {
            *per_src.entry(edge.src.as_str()).or_insert(0) += 1;
        }
        for (src, n) in per_src {
            assert_eq!(n, 1, "{src} kept more than top_m in-edges");
        }
    }

    #[test]
    fn khop_is_deterministic_and_validates_input() {
        let graph = two_hop_graph();
        let (cfg, store) = gat_setup(&graph);
        let a = khop_reasoning_subgraph(&graph, &cfg, &store, "d0", 2, 3, &[20, 10], 7).unwrap();
        let b = khop_reasoning_subgraph(&graph, &cfg, &store, "d0", 2, 3, &[20, 10], 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert!(matches!(
            khop_reasoning_subgraph(&graph, &cfg, &store, "p0", 1, 3, &[20, 10], 7),
            Err(AttnError::UnknownDrug { .. })
        ));
        assert!(matches!(
            khop_reasoning_subgraph(&graph, &cfg, &store, "d0", 3, 3, &[20, 10], 7),
            Err(AttnError::BadK { .. })
        ));
    }
}
