//! Heterogeneous graph storage keyed by meta relation.
//!
//! Nodes carry a type; every edge lives under exactly one meta relation
//! `<source type, edge type, target type>`. Adjacency is indexed by
//! (target node, relation) and answers "which sources feed this target",
//! which is the direction information flows during propagation. Inverse
//! relations are never auto-generated: a schema that wants both directions
//! declares both, each with its own parameters downstream.

use std::collections::{HashMap, HashSet};

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeTypeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeTypeId(pub usize);

/// Globally unique node handle: type tag plus index within that type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub ty: NodeTypeId,
    pub index: usize,
}

impl NodeId {
    pub fn new(ty: NodeTypeId, index: usize) -> Self {
        NodeId { ty, index }
    }
}

/// `<source type, edge type, target type>` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MetaRelation {
    pub src: NodeTypeId,
    pub edge: EdgeTypeId,
    pub dst: NodeTypeId,
}

/// Dense handle into a graph's relation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelId(pub usize);

/// Immutable heterogeneous graph. Adjacency answers `neighbors(target,
/// relation)` in O(1).
#[derive(Clone, Debug)]
pub struct HinGraph {
    type_names: Vec<String>,
    edge_names: Vec<String>,
    node_counts: Vec<usize>,
    relations: Vec<MetaRelation>,
    rel_index: HashMap<MetaRelation, RelId>,
    /// adjacency[rel][dst index] = source indices
    adjacency: Vec<Vec<Vec<u32>>>,
    edge_counts: Vec<usize>,
}

impl HinGraph {
    /// Build from declared node types and per-relation edge lists. Edges are
    /// `(src index, dst index)` within the relation's declared types.
    pub fn build(
        type_names: Vec<String>,
        node_counts: Vec<usize>,
        edge_names: Vec<String>,
        relation_edges: Vec<(MetaRelation, Vec<(u32, u32)>)>,
    ) -> Result<Self> {
        if type_names.len() != node_counts.len() {
            return Err(Error::Config(format!(
                "{} type names for {} node counts",
                type_names.len(),
                node_counts.len()
            )));
        }
        if type_names.len() + relation_edges.len() <= 2 {
            return Err(Error::NotHeterogeneous {
                types: type_names.len(),
                relations: relation_edges.len(),
            });
        }

        let mut relations = Vec::with_capacity(relation_edges.len());
        let mut rel_index = HashMap::new();
        let mut adjacency = Vec::with_capacity(relation_edges.len());
        let mut edge_counts = Vec::with_capacity(relation_edges.len());

        let label = |rel: &MetaRelation| -> String {
            format!(
                "<{}, {}, {}>",
                type_names.get(rel.src.0).map(String::as_str).unwrap_or("?"),
                edge_names.get(rel.edge.0).map(String::as_str).unwrap_or("?"),
                type_names.get(rel.dst.0).map(String::as_str).unwrap_or("?"),
            )
        };

        for (rel, edges) in relation_edges {
            if rel.src.0 >= node_counts.len()
                || rel.dst.0 >= node_counts.len()
                || rel.edge.0 >= edge_names.len()
            {
                return Err(Error::UnknownRelation(label(&rel)));
            }
            if rel_index.contains_key(&rel) {
                return Err(Error::Config(format!("duplicate relation {}", label(&rel))));
            }
            let mut adj = vec![Vec::new(); node_counts[rel.dst.0]];
            for (src, dst) in &edges {
                if *src as usize >= node_counts[rel.src.0] {
                    return Err(Error::BadEdge {
                        relation: label(&rel),
                        src: *src as usize,
                        dst: *dst as usize,
                        reason: format!(
                            "source index out of range for type {} (count {})",
                            type_names[rel.src.0], node_counts[rel.src.0]
                        ),
                    });
                }
                if *dst as usize >= node_counts[rel.dst.0] {
                    return Err(Error::BadEdge {
                        relation: label(&rel),
                        src: *src as usize,
                        dst: *dst as usize,
                        reason: format!(
                            "target index out of range for type {} (count {})",
                            type_names[rel.dst.0], node_counts[rel.dst.0]
                        ),
                    });
                }
                adj[*dst as usize].push(*src);
            }
            // Canonical neighbor order: input file order must not matter.
            for list in adj.iter_mut() {
                list.sort_unstable();
            }
            rel_index.insert(rel, RelId(relations.len()));
            relations.push(rel);
            adjacency.push(adj);
            edge_counts.push(edges.len());
        }

        Ok(HinGraph {
            type_names,
            edge_names,
            node_counts,
            relations,
            rel_index,
            adjacency,
            edge_counts,
        })
    }

    pub fn num_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn node_count(&self, ty: NodeTypeId) -> usize {
        self.node_counts[ty.0]
    }

    pub fn node_counts(&self) -> &[usize] {
        &self.node_counts
    }

    pub fn type_name(&self, ty: NodeTypeId) -> &str {
        &self.type_names[ty.0]
    }

    pub fn edge_name(&self, edge: EdgeTypeId) -> &str {
        &self.edge_names[edge.0]
    }

    pub fn type_names(&self) -> &[String] {
        &self.type_names
    }

    pub fn edge_names(&self) -> &[String] {
        &self.edge_names
    }

    pub fn type_id(&self, name: &str) -> Option<NodeTypeId> {
        self.type_names.iter().position(|n| n == name).map(NodeTypeId)
    }

    pub fn edge_id(&self, name: &str) -> Option<EdgeTypeId> {
        self.edge_names.iter().position(|n| n == name).map(EdgeTypeId)
    }

    pub fn relations(&self) -> &[MetaRelation] {
        &self.relations
    }

    pub fn relation(&self, rel: RelId) -> &MetaRelation {
        &self.relations[rel.0]
    }

    pub fn rel_id(&self, rel: &MetaRelation) -> Option<RelId> {
        self.rel_index.get(rel).copied()
    }

    pub fn edge_count(&self, rel: RelId) -> usize {
        self.edge_counts[rel.0]
    }

    /// Human-readable `<Src, edge, Dst>` label.
    pub fn relation_label(&self, rel: RelId) -> String {
        let r = &self.relations[rel.0];
        format!(
            "<{}, {}, {}>",
            self.type_names[r.src.0], self.edge_names[r.edge.0], self.type_names[r.dst.0]
        )
    }

    /// Source neighbors feeding `target` under `rel`.
    pub fn neighbors(&self, target: NodeId, rel: RelId) -> Result<&[u32]> {
        let r = &self.relations[rel.0];
        if r.dst != target.ty {
            return Err(Error::UnknownRelation(format!(
                "{} does not target type {}",
                self.relation_label(rel),
                self.type_name(target.ty)
            )));
        }
        Ok(&self.adjacency[rel.0][target.index])
    }

    pub fn degree(&self, target: NodeId, rel: RelId) -> usize {
        self.adjacency[rel.0][target.index].len()
    }

    /// Relations whose target type is `ty`, in declaration order.
    pub fn relations_into(&self, ty: NodeTypeId) -> Vec<RelId> {
        self.relations
            .iter()
            .enumerate()
            .filter(|(_, r)| r.dst == ty)
            .map(|(i, _)| RelId(i))
            .collect()
    }
}

/// Fixed-length neighbor sample: real neighbors first, zero-padded slots
/// masked false.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledNeighborhood {
    pub relation: RelId,
    pub src_type: NodeTypeId,
    pub neighbor_ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl SampledNeighborhood {
    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_all_masked(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    /// Real (unmasked) neighbors as typed node handles.
    pub fn real_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.neighbor_ids
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&n, _)| NodeId::new(self.src_type, n as usize))
    }
}

/// Uniform fixed-fan-out sampling without replacement. Degrees below the
/// fan-out keep every neighbor and pad; degree zero yields a fully masked
/// neighborhood the model excludes upstream.
pub fn sample_neighbors(
    g: &HinGraph,
    target: NodeId,
    rel: RelId,
    fanout: usize,
    rng: &mut StdRng,
) -> Result<SampledNeighborhood> {
    let pool = g.neighbors(target, rel)?;
    let mut neighbor_ids = vec![0u32; fanout];
    let mut mask = vec![false; fanout];
    if pool.len() <= fanout {
        for (slot, &n) in pool.iter().enumerate() {
            neighbor_ids[slot] = n;
            mask[slot] = true;
        }
    } else {
        let picks = rand::seq::index::sample(rng, pool.len(), fanout);
        for (slot, pick) in picks.into_iter().enumerate() {
            neighbor_ids[slot] = pool[pick];
            mask[slot] = true;
        }
    }
    Ok(SampledNeighborhood {
        relation: rel,
        src_type: g.relation(rel).src,
        neighbor_ids,
        mask,
    })
}

/// Per-depth fan-out plan with optional per-relation overrides.
#[derive(Clone, Debug)]
pub struct Fanouts {
    per_depth: Vec<usize>,
    per_relation: HashMap<RelId, usize>,
}

impl Fanouts {
    pub fn uniform(fanout: usize, depth: usize) -> Self {
        Fanouts { per_depth: vec![fanout; depth], per_relation: HashMap::new() }
    }

    pub fn per_depth(per_depth: Vec<usize>) -> Self {
        Fanouts { per_depth, per_relation: HashMap::new() }
    }

    pub fn override_relation(mut self, rel: RelId, fanout: usize) -> Self {
        self.per_relation.insert(rel, fanout);
        self
    }

    pub fn depth(&self) -> usize {
        self.per_depth.len()
    }

    pub fn resolve(&self, hop: usize, rel: RelId) -> usize {
        self.per_relation.get(&rel).copied().unwrap_or(self.per_depth[hop])
    }
}

/// One materialized node with its sampled neighborhoods, one per relation
/// present at that node (absent relations are excluded, so the inter-relation
/// softmax downstream renormalizes over what exists).
#[derive(Clone, Debug)]
pub struct TreeNode {
    pub node: NodeId,
    pub neighborhoods: Vec<SampledNeighborhood>,
}

/// The L-hop sampled receptive field of one root, evaluated deepest hop
/// first. `levels[d]` holds nodes materialized at depth d (level 0 is the
/// root alone); nodes at depth L appear only as sampled neighbor ids and
/// contribute raw features.
#[derive(Clone, Debug)]
pub struct ComputationTree {
    pub root: NodeId,
    pub levels: Vec<Vec<TreeNode>>,
}

impl ComputationTree {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Nodes at a given depth, root at 0; depth L is the raw-feature
    /// frontier reconstructed from the deepest level's samples.
    pub fn nodes_at_depth(&self, d: usize) -> Vec<NodeId> {
        if d < self.levels.len() {
            return self.levels[d].iter().map(|t| t.node).collect();
        }
        assert_eq!(d, self.levels.len(), "depth beyond the tree");
        frontier_of(&self.levels[d - 1])
    }
}

fn frontier_of(level: &[TreeNode]) -> Vec<NodeId> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for tn in level {
        for nb in &tn.neighborhoods {
            for node in nb.real_nodes() {
                if seen.insert(node) {
                    out.push(node);
                }
            }
        }
    }
    out
}

/// Deterministic per-(seed, root) stream so concurrent extraction and
/// per-batch caching see identical trees.
fn tree_rng(seed: u64, root: NodeId) -> StdRng {
    let mut h = seed ^ 0x9e3779b97f4a7c15u64;
    for v in [root.ty.0 as u64 + 1, root.index as u64 + 1] {
        h ^= v;
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d049bb133111eb);
        h ^= h >> 31;
    }
    StdRng::seed_from_u64(h)
}

/// Build the sampled receptive field for one root: every relation incident
/// to every materialized node, hop by hop, deduplicated per (node, depth).
pub fn build_computation_tree(
    g: &HinGraph,
    root: NodeId,
    depth: usize,
    fanouts: &Fanouts,
    seed: u64,
) -> Result<ComputationTree> {
    assert!(depth >= 1, "computation tree needs at least one hop");
    assert!(fanouts.depth() >= depth, "fanout plan shallower than the tree");
    let mut rng = tree_rng(seed, root);
    let mut levels: Vec<Vec<TreeNode>> = Vec::with_capacity(depth);
    let mut current = vec![root];
    for hop in 0..depth {
        let mut level = Vec::with_capacity(current.len());
        let mut next_seen = HashSet::new();
        let mut next = Vec::new();
        for &node in &current {
            let mut neighborhoods = Vec::new();
            for rel in g.relations_into(node.ty) {
                if g.degree(node, rel) == 0 {
                    continue;
                }
                let fanout = fanouts.resolve(hop, rel);
                let nb = sample_neighbors(g, node, rel, fanout, &mut rng)?;
                for n in nb.real_nodes() {
                    if next_seen.insert(n) {
                        next.push(n);
                    }
                }
                neighborhoods.push(nb);
            }
            level.push(TreeNode { node, neighborhoods });
        }
        levels.push(level);
        current = next;
    }
    Ok(ComputationTree { root, levels })
}

/// Trees for a batch of targets; each tree is deterministic per
/// (seed, target) independent of batch composition.
pub fn build_computation_trees(
    g: &HinGraph,
    targets: &[NodeId],
    depth: usize,
    fanouts: &Fanouts,
    seed: u64,
) -> Result<Vec<ComputationTree>> {
    targets.iter().map(|&t| build_computation_tree(g, t, depth, fanouts, seed)).collect()
}
