//! Dataset ingestion, core filtering and chronological splitting.
//!
//! A dataset is a manifest (JSON) naming node types with counts and one TSV
//! file per meta relation, lines `src<TAB>dst[<TAB>timestamp]`. Exactly one
//! relation is designated the user-item interaction relation; its timestamps
//! drive the global chronological split. Inverse relations are declared
//! explicitly, usually as a second entry over the same file with
//! `reverse: true`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hin::{EdgeTypeId, HinGraph, MetaRelation, NodeTypeId, RelId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub ts: i64,
}

/// Raw timestamped user-item interactions, in input order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// The log after the global chronological 80/10/10 (configurable) split:
/// records sorted by timestamp, ties broken by stable input order.
#[derive(Clone, Debug)]
pub struct SplitLog {
    records: Vec<Interaction>,
    train_end: usize,
    valid_end: usize,
}

impl SplitLog {
    pub fn all(&self) -> &[Interaction] {
        &self.records
    }

    pub fn part(&self, split: Split) -> &[Interaction] {
        match split {
            Split::Train => &self.records[..self.train_end],
            Split::Valid => &self.records[self.train_end..self.valid_end],
            Split::Test => &self.records[self.valid_end..],
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Sort the whole log by timestamp and cut it into train/valid/test by the
/// given fractions. Equal timestamps keep their input order.
pub fn chronological_split(log: &InteractionLog, fractions: (f64, f64, f64)) -> Result<SplitLog> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions ({ft}, {fv}, {fe}) must be positive and sum to 1"
        )));
    }
    let mut records = log.records.clone();
    records.sort_by_key(|r| r.ts);
    let n = records.len();
    let train_end = (n as f64 * ft).floor() as usize;
    let valid_end = (n as f64 * (ft + fv)).floor() as usize;
    if train_end == 0 || valid_end == train_end || valid_end == n {
        return Err(Error::Data(format!(
            "split of {n} interactions leaves an empty partition ({}, {}, {})",
            train_end,
            valid_end - train_end,
            n - valid_end
        )));
    }
    Ok(SplitLog { records, train_end, valid_end })
}

/// Per-user item sets for each split, the index negative sampling and
/// evaluation work from.
#[derive(Clone, Debug)]
pub struct UserItemIndex {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<HashSet<u32>>,
    pub valid: Vec<HashSet<u32>>,
    pub test: Vec<HashSet<u32>>,
    /// Union across splits; evaluation negatives must avoid all of it.
    pub any: Vec<HashSet<u32>>,
}

impl UserItemIndex {
    pub fn build(log: &SplitLog, n_users: usize, n_items: usize) -> Self {
        let mut idx = UserItemIndex {
            n_users,
            n_items,
            train: vec![HashSet::new(); n_users],
            valid: vec![HashSet::new(); n_users],
            test: vec![HashSet::new(); n_users],
            any: vec![HashSet::new(); n_users],
        };
        for split in [Split::Train, Split::Valid, Split::Test] {
            for r in log.part(split) {
                let set = match split {
                    Split::Train => &mut idx.train,
                    Split::Valid => &mut idx.valid,
                    Split::Test => &mut idx.test,
                };
                set[r.user as usize].insert(r.item);
                idx.any[r.user as usize].insert(r.item);
            }
        }
        idx
    }

    pub fn part(&self, split: Split) -> &[HashSet<u32>] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

// ── manifest ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeTypeDecl {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelationDecl {
    pub src: String,
    pub edge: String,
    pub dst: String,
    pub file: String,
    /// Read file lines as (dst, src) instead of (src, dst).
    #[serde(default)]
    pub reverse: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DegreeThreshold {
    pub node_type: String,
    pub edge: String,
    pub min_degree: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub node_types: Vec<NodeTypeDecl>,
    pub relations: Vec<RelationDecl>,
    /// Edge name of the user-item interaction relation (its non-reversed
    /// declaration orients users as sources).
    pub interaction_relation: String,
    #[serde(default)]
    pub core_filter: Vec<DegreeThreshold>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// A loaded dataset: the graph, the raw interaction log, and the handles
/// that orient users and items within the schema.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: HinGraph,
    pub log: InteractionLog,
    pub interaction: RelId,
    pub user_type: NodeTypeId,
    pub item_type: NodeTypeId,
}

struct ParsedRelation {
    rel: MetaRelation,
    edges: Vec<(u32, u32)>,
    timestamps: Vec<Option<i64>>,
}

fn parse_relation_file(
    path: &Path,
    decl: &RelationDecl,
    src_count: usize,
    dst_count: usize,
) -> Result<(Vec<(u32, u32)>, Vec<Option<i64>>)> {
    let file_label = path.display().to_string();
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(file_label.clone(), e))?;
    let mut edges = Vec::new();
    let mut timestamps = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let bad = |reason: String| Error::MalformedLine {
            file: file_label.clone(),
            line: line_no,
            reason,
        };
        let a: u32 = cols
            .next()
            .ok_or_else(|| bad("missing source column".into()))?
            .trim()
            .parse()
            .map_err(|_| bad(format!("unparseable source id in {line:?}")))?;
        let b: u32 = cols
            .next()
            .ok_or_else(|| bad("missing target column".into()))?
            .trim()
            .parse()
            .map_err(|_| bad(format!("unparseable target id in {line:?}")))?;
        let ts: Option<i64> = match cols.next() {
            Some(t) => Some(
                t.trim()
                    .parse()
                    .map_err(|_| bad(format!("unparseable timestamp in {line:?}")))?,
            ),
            None => None,
        };
        let (src, dst) = if decl.reverse { (b, a) } else { (a, b) };
        if src as usize >= src_count {
            return Err(bad(format!(
                "source id {src} out of range for type {} (count {src_count})",
                decl.src
            )));
        }
        if dst as usize >= dst_count {
            return Err(bad(format!(
                "target id {dst} out of range for type {} (count {dst_count})",
                decl.dst
            )));
        }
        edges.push((src, dst));
        timestamps.push(ts);
    }
    Ok((edges, timestamps))
}

/// Load a manifest: parse every relation file, build the graph and the
/// interaction log, then apply the manifest's core filter.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    if !manifest_path.exists() {
        return Err(Error::Data(format!("manifest not found: {}", manifest_path.display())));
    }
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    load_dataset_from(&manifest, base)
}

pub fn load_dataset_from(manifest: &DatasetManifest, base: &Path) -> Result<Dataset> {
    let type_names: Vec<String> = manifest.node_types.iter().map(|t| t.name.clone()).collect();
    let counts: Vec<usize> = manifest.node_types.iter().map(|t| t.count).collect();
    let type_id = |name: &str| -> Result<NodeTypeId> {
        type_names
            .iter()
            .position(|n| n == name)
            .map(NodeTypeId)
            .ok_or_else(|| Error::Config(format!("unknown node type {name:?} in manifest")))
    };

    let mut edge_names: Vec<String> = Vec::new();
    let edge_id = |name: &str, edge_names: &mut Vec<String>| -> EdgeTypeId {
        if let Some(i) = edge_names.iter().position(|n| n == name) {
            EdgeTypeId(i)
        } else {
            edge_names.push(name.to_string());
            EdgeTypeId(edge_names.len() - 1)
        }
    };

    let mut parsed: Vec<ParsedRelation> = Vec::new();
    let mut interaction_entry: Option<usize> = None;
    for decl in &manifest.relations {
        let src = type_id(&decl.src)?;
        let dst = type_id(&decl.dst)?;
        let edge = edge_id(&decl.edge, &mut edge_names);
        let mut path = PathBuf::from(&decl.file);
        if path.is_relative() {
            path = base.join(path);
        }
        let (edges, timestamps) =
            parse_relation_file(&path, decl, counts[src.0], counts[dst.0])?;
        if decl.edge == manifest.interaction_relation && !decl.reverse {
            if interaction_entry.is_some() {
                return Err(Error::Config(format!(
                    "multiple forward declarations of interaction relation {:?}",
                    manifest.interaction_relation
                )));
            }
            interaction_entry = Some(parsed.len());
        }
        parsed.push(ParsedRelation {
            rel: MetaRelation { src, edge, dst },
            edges,
            timestamps,
        });
    }
    let interaction_entry = interaction_entry.ok_or_else(|| {
        Error::Config(format!(
            "interaction relation {:?} not declared (forward direction)",
            manifest.interaction_relation
        ))
    })?;

    let mut log = InteractionLog::default();
    {
        let entry = &parsed[interaction_entry];
        for (i, &(u, v)) in entry.edges.iter().enumerate() {
            let ts = entry.timestamps[i].ok_or_else(|| Error::Data(format!(
                "interaction relation {:?} requires timestamps on every line",
                manifest.interaction_relation
            )))?;
            log.records.push(Interaction { user: u, item: v, ts });
        }
    }

    let user_type = parsed[interaction_entry].rel.src;
    let item_type = parsed[interaction_entry].rel.dst;

    let graph = HinGraph::build(
        type_names,
        counts,
        edge_names,
        parsed.into_iter().map(|p| (p.rel, p.edges)).collect(),
    )?;
    let interaction = graph
        .rel_id(&MetaRelation {
            src: user_type,
            edge: graph.edge_id(&manifest.interaction_relation).expect("edge interned"),
            dst: item_type,
        })
        .expect("interaction relation built");

    let dataset = Dataset { graph, log, interaction, user_type, item_type };
    if manifest.core_filter.is_empty() {
        return Ok(dataset);
    }
    let (graph, log, _) = core_filter(
        &dataset.graph,
        &dataset.log,
        (dataset.user_type, dataset.item_type),
        &manifest.core_filter,
        &[dataset.user_type, dataset.item_type],
    )?;
    let interaction = graph
        .rel_id(&dataset.graph.relation(dataset.interaction).clone())
        .expect("relations survive filtering");
    Ok(Dataset {
        graph,
        log,
        interaction,
        user_type: dataset.user_type,
        item_type: dataset.item_type,
    })
}

/// What core filtering did: per-type survivor maps (old index -> new) and
/// the number of fixpoint rounds.
#[derive(Clone, Debug)]
pub struct FilterReport {
    pub rounds: usize,
    pub removed_per_type: Vec<usize>,
    pub id_maps: Vec<Vec<Option<u32>>>,
}

/// Iteratively remove nodes whose degree under a named edge falls below its
/// threshold, cascading edge removal, until a fixpoint. Node indices are
/// compacted afterwards; log records are remapped through the user and item
/// types given in `log_types`. Types listed in `required` must survive
/// non-empty.
pub fn core_filter(
    graph: &HinGraph,
    log: &InteractionLog,
    log_types: (NodeTypeId, NodeTypeId),
    thresholds: &[DegreeThreshold],
    required: &[NodeTypeId],
) -> Result<(HinGraph, InteractionLog, FilterReport)> {
    // Resolve threshold names once.
    let mut resolved: Vec<(NodeTypeId, EdgeTypeId, usize)> = Vec::new();
    for t in thresholds {
        let ty = graph
            .type_id(&t.node_type)
            .ok_or_else(|| Error::Config(format!("unknown node type {:?}", t.node_type)))?;
        let edge = graph
            .edge_id(&t.edge)
            .ok_or_else(|| Error::Config(format!("unknown edge {:?}", t.edge)))?;
        resolved.push((ty, edge, t.min_degree));
    }

    let mut alive: Vec<Vec<bool>> =
        graph.node_counts().iter().map(|&c| vec![true; c]).collect();
    // Edge lists as (relation, src, dst) tuples we can re-filter cheaply.
    let rel_edges: Vec<(MetaRelation, Vec<(u32, u32)>)> = graph
        .relations()
        .iter()
        .enumerate()
        .map(|(ri, rel)| {
            let mut edges = Vec::new();
            for dst in 0..graph.node_count(rel.dst) {
                for &src in graph
                    .neighbors(crate::hin::NodeId::new(rel.dst, dst), RelId(ri))
                    .expect("relation targets its own type")
                {
                    edges.push((src, dst as u32));
                }
            }
            (*rel, edges)
        })
        .collect();

    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut changed = false;
        for &(ty, edge, min) in &resolved {
            if min == 0 {
                continue;
            }
            let mut degree = vec![0usize; graph.node_count(ty)];
            for (rel, edges) in &rel_edges {
                if rel.edge != edge {
                    continue;
                }
                for &(src, dst) in edges {
                    if !alive[rel.src.0][src as usize] || !alive[rel.dst.0][dst as usize] {
                        continue;
                    }
                    if rel.src == ty {
                        degree[src as usize] += 1;
                    }
                    if rel.dst == ty {
                        degree[dst as usize] += 1;
                    }
                }
            }
            for (i, &d) in degree.iter().enumerate() {
                if alive[ty.0][i] && d < min {
                    alive[ty.0][i] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    for &ty in required {
        if !alive[ty.0].iter().any(|&a| a) {
            return Err(Error::Data(format!(
                "core filter removed every {} node ({} thresholds, {} rounds)",
                graph.type_name(ty),
                thresholds.len(),
                rounds
            )));
        }
    }

    // Compact indices.
    let mut id_maps: Vec<Vec<Option<u32>>> = Vec::with_capacity(alive.len());
    let mut new_counts = Vec::with_capacity(alive.len());
    for per_type in &alive {
        let mut map = Vec::with_capacity(per_type.len());
        let mut next = 0u32;
        for &a in per_type {
            if a {
                map.push(Some(next));
                next += 1;
            } else {
                map.push(None);
            }
        }
        new_counts.push(next as usize);
        id_maps.push(map);
    }

    let new_relations: Vec<(MetaRelation, Vec<(u32, u32)>)> = rel_edges
        .iter()
        .map(|(rel, edges)| {
            let remapped = edges
                .iter()
                .filter_map(|&(src, dst)| {
                    let s = id_maps[rel.src.0][src as usize]?;
                    let d = id_maps[rel.dst.0][dst as usize]?;
                    Some((s, d))
                })
                .collect();
            (*rel, remapped)
        })
        .collect();

    let new_graph = HinGraph::build(
        graph.type_names().to_vec(),
        new_counts,
        graph.edge_names().to_vec(),
        new_relations,
    )?;

    // Remap the log; records touching removed nodes disappear with them.
    let (user_map, item_map) = (&id_maps[log_types.0 .0], &id_maps[log_types.1 .0]);
    let new_log = InteractionLog {
        records: log
            .records
            .iter()
            .filter_map(|r| {
                let u = user_map.get(r.user as usize).copied().flatten()?;
                let v = item_map.get(r.item as usize).copied().flatten()?;
                Some(Interaction { user: u, item: v, ts: r.ts })
            })
            .collect(),
    };

    let removed_per_type =
        alive.iter().map(|per| per.iter().filter(|&&a| !a).count()).collect();
    Ok((new_graph, new_log, FilterReport { rounds, removed_per_type, id_maps }))
}

/// Check that every surviving node meets every threshold; used as the
/// fixpoint postcondition in tests.
pub fn satisfies_thresholds(graph: &HinGraph, thresholds: &[DegreeThreshold]) -> Result<bool> {
    for t in thresholds {
        let ty = graph
            .type_id(&t.node_type)
            .ok_or_else(|| Error::Config(format!("unknown node type {:?}", t.node_type)))?;
        let edge = graph
            .edge_id(&t.edge)
            .ok_or_else(|| Error::Config(format!("unknown edge {:?}", t.edge)))?;
        let mut degree = vec![0usize; graph.node_count(ty)];
        for (ri, rel) in graph.relations().iter().enumerate() {
            if rel.edge != edge {
                continue;
            }
            for dst in 0..graph.node_count(rel.dst) {
                let nbrs = graph
                    .neighbors(crate::hin::NodeId::new(rel.dst, dst), RelId(ri))
                    .expect("relation targets its own type");
                if rel.dst == ty {
                    degree[dst] += nbrs.len();
                }
                if rel.src == ty {
                    for &s in nbrs {
                        degree[s as usize] += 1;
                    }
                }
            }
        }
        if degree.iter().any(|&d| d < t.min_degree) {
            return Ok(false);
        }
    }
    Ok(true)
}
