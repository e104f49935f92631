//! Seeded minibatch construction and bounded neighbor sampling.
//!
//! Messages flow against the declared edge direction: the node on the
//! source side of an edge type receives from the destination side, so a
//! drug aggregates from its target proteins. "In-neighbors" of a receiver
//! therefore come from the forward adjacency row of that receiver.

use crate::graph::{Direction, EdgeType, HeteroGraph, NodeType};
use crate::rng;
use indexmap::{IndexMap, IndexSet};
use rand::seq::index;

/// Edges sampled for one hop of one edge type. Pairs are
/// (receiver_local, sender_local), sorted by receiver then sender;
/// receiver locals index the subgraph's node list for `edge_type.src_type`
/// and sender locals the list for `edge_type.dst_type`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopEdges {
    pub edge_type: EdgeType,
    pub pairs: Vec<(u32, u32)>,
}

/// A multi-hop sampled neighborhood around seed nodes.
///
/// `hops[0]` holds the edges sampled directly from the seeds, `hops[h]`
/// those sampled from everything retained before hop h. Node lists per
/// type are in first-retained order, seeds first.
#[derive(Debug, Clone)]
pub struct SampledSubgraph {
    pub seed_type: NodeType,
    pub n_seeds: usize,
    pub nodes: IndexMap<NodeType, IndexSet<u32>>,
    pub hops: Vec<Vec<HopEdges>>,
}

impl SampledSubgraph {
    pub fn local(&self, t: NodeType, global: u32) -> Option<u32> {
        self.nodes
            .get(&t)
            .and_then(|s| s.get_index_of(&global))
            .map(|i| i as u32)
    }

    pub fn global_ids(&self, t: NodeType) -> Vec<u32> {
        self.nodes
            .get(&t)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn n_local(&self, t: NodeType) -> usize {
        self.nodes.get(&t).map_or(0, |s| s.len())
    }
}

/// Sample a breadth-limited neighborhood of `seeds` (all of type
/// `seed_type`), taking at most `fanouts[h]` in-neighbors per (node, edge
/// type) at hop h, without replacement. Nodes with degree below the
/// fan-out keep all neighbors.
pub fn sample_neighbors(
    g: &HeteroGraph,
    seed_type: NodeType,
    seeds: &[u32],
    fanouts: &[usize],
    seed: u64,
) -> SampledSubgraph {
    assert!(!seeds.is_empty(), "sample_neighbors needs seeds");
    assert!(!fanouts.is_empty());
    let mut r = rng::stream(seed, "neighbor-sample", &[]);
    let mut nodes: IndexMap<NodeType, IndexSet<u32>> = IndexMap::new();
    nodes.entry(seed_type).or_default().extend(seeds.iter().copied());
    assert_eq!(
        nodes[&seed_type].len(),
        seeds.len(),
        "duplicate seed nodes"
    );

    let etypes: Vec<EdgeType> = g.edge_types().cloned().collect();
    let mut hops: Vec<Vec<HopEdges>> = Vec::with_capacity(fanouts.len());
    for &fanout in fanouts {
        assert!(fanout > 0);
        // frontier for this hop: everything retained so far, in order
        let frontier: Vec<(NodeType, Vec<u32>)> = nodes
            .iter()
            .map(|(&t, set)| (t, set.iter().copied().collect()))
            .collect();
        let mut hop: Vec<HopEdges> = Vec::new();
        for et in &etypes {
            let mut pairs: Vec<(u32, u32)> = Vec::new();
            let mut senders: Vec<u32> = Vec::new();
            for (t, members) in &frontier {
                if *t != et.src_type {
                    continue;
                }
                for &receiver in members {
                    let row = g
                        .neighbors((et.src_type, receiver), et, Direction::Forward)
                        .expect("edge type came from the graph");
                    if row.is_empty() {
                        continue;
                    }
                    let chosen: Vec<u32> = if row.len() <= fanout {
                        row.to_vec()
                    } else {
                        let mut picks = index::sample(&mut r, row.len(), fanout)
                            .into_iter()
                            .map(|i| row[i])
                            .collect::<Vec<u32>>();
                        picks.sort_unstable();
                        picks
                    };
                    for s in chosen {
                        pairs.push((receiver, s));
                        senders.push(s);
                    }
                }
            }
            if pairs.is_empty() {
                continue;
            }
            let dst_slot = nodes.entry(et.dst_type).or_default();
            for s in senders {
                dst_slot.insert(s);
            }
            hop.push(HopEdges {
                edge_type: et.clone(),
                pairs,
            });
        }
        // remap global ids to local positions now that all senders exist
        for he in &mut hop {
            let src_set = &nodes[&he.edge_type.src_type];
            let dst_set = &nodes[&he.edge_type.dst_type];
            for p in &mut he.pairs {
                p.0 = src_set.get_index_of(&p.0).unwrap() as u32;
                p.1 = dst_set.get_index_of(&p.1).unwrap() as u32;
            }
            he.pairs.sort_unstable();
        }
        hops.push(hop);
    }
    SampledSubgraph {
        seed_type,
        n_seeds: seeds.len(),
        nodes,
        hops,
    }
}

/// Seeded shuffle of 0..n followed by contiguous chunks; the last batch
/// may be short. The union of batches is exactly 0..n.
pub fn make_batches(n: usize, batch_size: usize, shuffle_seed: u64) -> Vec<Vec<usize>> {
    assert!(n > 0, "make_batches needs samples");
    assert!(batch_size > 0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(shuffle_seed, "batches", &[]);
    use rand::seq::SliceRandom;
    order.shuffle(&mut r);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Stream seed for one (epoch, batch) cell so batches can be prepared in
/// any order or in parallel without changing results.
pub fn batch_seed(seed: u64, epoch: u64, batch_index: u64) -> u64 {
    rng::derive_labeled(seed, "batch", &[epoch, batch_index])
}
