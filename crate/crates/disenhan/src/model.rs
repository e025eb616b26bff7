//! The disentangled propagation network.
//!
//! Each layer projects node features into K aspect subspaces, attends over
//! every meta-relation neighbor group, and routes each relation toward the
//! aspects that explain it. Routing is an inner loop: attention uses the
//! previous iteration's target embedding and relation weights, the relation
//! weights are re-estimated from the aggregated summaries, and the target
//! embedding takes a residual update followed by per-aspect normalization.
//! Stacking layers widens the receptive field one hop per layer; scoring
//! sums per-aspect inner products of the root embeddings.

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hin::{ComputationTree, HinGraph, MetaRelation, NodeId, NodeTypeId, RelId};
use crate::tape::{ParamId, ParamSet, Tape, ValueId};
use crate::tensor::{Real, Tensor};

/// Aspect count, output width and routing iterations of one layer. Layer 0
/// produces the root output; deeper layers serve farther hops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub aspects: usize,
    pub out_dim: usize,
    pub iters: usize,
}

impl LayerSpec {
    pub fn new(aspects: usize, out_dim: usize, iters: usize) -> Self {
        LayerSpec { aspects, out_dim, iters }
    }

    pub fn sub_dim(&self) -> usize {
        self.out_dim / self.aspects
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the free per-node embeddings consumed by the deepest layer.
    pub feature_dim: usize,
    pub layers: Vec<LayerSpec>,
    /// Give every relation its own semantic transform instead of one shared
    /// square matrix per layer.
    #[serde(default)]
    pub per_relation_semantic: bool,
    /// Dropout rate on attention weights and channel projections while
    /// training.
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("at least one propagation layer required".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.aspects == 0 || spec.out_dim == 0 || spec.iters == 0 {
                return Err(Error::Config(format!("layer {l} has a zero dimension")));
            }
            if spec.out_dim % spec.aspects != 0 {
                return Err(Error::Config(format!(
                    "layer {l}: out_dim {} not divisible by {} aspects",
                    spec.out_dim, spec.aspects
                )));
            }
        }
        // Aspect counts may only shrink with hop distance.
        for w in self.layers.windows(2) {
            if w[0].aspects < w[1].aspects {
                return Err(Error::Config(format!(
                    "aspect counts must be non-increasing with depth: {} < {}",
                    w[0].aspects, w[1].aspects
                )));
            }
        }
        Ok(())
    }

    /// Input width of layer `l`: deeper layers feed shallower ones their
    /// concatenated channels; the deepest consumes raw features.
    pub fn in_dim(&self, l: usize) -> usize {
        if l + 1 < self.layers.len() {
            self.layers[l + 1].out_dim
        } else {
            self.feature_dim
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Trainable handles for one layer.
#[derive(Clone, Debug)]
struct LayerParams {
    /// proj[type][aspect]: in_dim x sub_dim
    proj: Vec<Vec<ParamId>>,
    /// attn[rel]: 2 * sub_dim
    attn: Vec<ParamId>,
    /// sem[rel]: sub_dim
    sem: Vec<ParamId>,
    /// One shared sub_dim x sub_dim transform, or one per relation.
    semantic_w: Vec<ParamId>,
}

impl LayerParams {
    fn semantic_w(&self, rel: RelId) -> ParamId {
        if self.semantic_w.len() == 1 {
            self.semantic_w[0]
        } else {
            self.semantic_w[rel.0]
        }
    }
}

/// Schema the model was built against; snapshots must match it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaInfo {
    pub type_names: Vec<String>,
    pub edge_names: Vec<String>,
    pub node_counts: Vec<usize>,
    /// (src type, edge type, dst type) triples.
    pub relations: Vec<(usize, usize, usize)>,
}

impl SchemaInfo {
    pub fn of(graph: &HinGraph) -> Self {
        SchemaInfo {
            type_names: graph.type_names().to_vec(),
            edge_names: graph.edge_names().to_vec(),
            node_counts: graph.node_counts().to_vec(),
            relations: graph
                .relations()
                .iter()
                .map(|r| (r.src.0, r.edge.0, r.dst.0))
                .collect(),
        }
    }
}

#[derive(Clone)]
pub struct DisenHan<F: Real> {
    pub params: ParamSet<F>,
    config: ModelConfig,
    schema: SchemaInfo,
    /// feature_tables[type]: node_count x feature_dim
    feature_tables: Vec<ParamId>,
    layers: Vec<LayerParams>,
}

fn glorot<F: Real>(rng: &mut StdRng, rows: usize, cols: usize) -> Tensor<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| F::of(rng.gen_range(-limit..limit))).collect();
    Tensor::new(vec![rows, cols], data).expect("sized data")
}

fn glorot_vec<F: Real>(rng: &mut StdRng, n: usize) -> Tensor<F> {
    let limit = (6.0 / (n + 1) as f64).sqrt();
    Tensor::vector((0..n).map(|_| F::of(rng.gen_range(-limit..limit))).collect())
}

fn normal_draw(rng: &mut StdRng) -> f64 {
    // Box-Muller; one draw per call keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl<F: Real> DisenHan<F> {
    /// Fresh model for a graph schema: free ID embeddings (0.1-std normal)
    /// and fan-scaled uniform projections/attention vectors.
    pub fn new(graph: &HinGraph, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schema = SchemaInfo::of(graph);
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        let mut feature_tables = Vec::with_capacity(schema.type_names.len());
        for (ty, name) in schema.type_names.iter().enumerate() {
            let rows = schema.node_counts[ty];
            let data =
                (0..rows * config.feature_dim).map(|_| F::of(0.1 * normal_draw(&mut rng)));
            let table = Tensor::new(vec![rows, config.feature_dim], data.collect())
                .expect("sized data");
            feature_tables.push(params.add(format!("feat.{name}"), table));
        }

        let mut layers = Vec::with_capacity(config.layers.len());
        for (l, spec) in config.layers.iter().enumerate() {
            let in_dim = config.in_dim(l);
            let sub = spec.sub_dim();
            let mut proj = Vec::with_capacity(schema.type_names.len());
            for name in &schema.type_names {
                let mut per_aspect = Vec::with_capacity(spec.aspects);
                for k in 0..spec.aspects {
                    per_aspect.push(params.add(
                        format!("layer{l}.proj.{name}.k{k}"),
                        glorot(&mut rng, in_dim, sub),
                    ));
                }
                proj.push(per_aspect);
            }
            let mut attn = Vec::with_capacity(schema.relations.len());
            let mut sem = Vec::with_capacity(schema.relations.len());
            for (r, _) in schema.relations.iter().enumerate() {
                let label = graph.relation_label(RelId(r));
                attn.push(params.add(format!("layer{l}.attn.{label}"), glorot_vec(&mut rng, 2 * sub)));
                sem.push(params.add(format!("layer{l}.sem.{label}"), glorot_vec(&mut rng, sub)));
            }
            let semantic_w = if config.per_relation_semantic {
                (0..schema.relations.len())
                    .map(|r| {
                        let label = graph.relation_label(RelId(r));
                        params.add(format!("layer{l}.w.{label}"), glorot(&mut rng, sub, sub))
                    })
                    .collect()
            } else {
                vec![params.add(format!("layer{l}.w"), glorot(&mut rng, sub, sub))]
            };
            layers.push(LayerParams { proj, attn, sem, semantic_w });
        }

        Ok(DisenHan { params, config, schema, feature_tables, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &SchemaInfo {
        &self.schema
    }

    pub fn num_relations(&self) -> usize {
        self.schema.relations.len()
    }

    pub fn relation(&self, rel: RelId) -> MetaRelation {
        let (s, e, d) = self.schema.relations[rel.0];
        MetaRelation {
            src: NodeTypeId(s),
            edge: crate::hin::EdgeTypeId(e),
            dst: NodeTypeId(d),
        }
    }

    pub fn relation_label(&self, rel: RelId) -> String {
        let (s, e, d) = self.schema.relations[rel.0];
        format!(
            "<{}, {}, {}>",
            self.schema.type_names[s], self.schema.edge_names[e], self.schema.type_names[d]
        )
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            config: self.config.clone(),
            schema: self.schema.clone(),
            params: self
                .params
                .ids()
                .map(|id| SnapshotTensor {
                    name: self.params.name(id).to_string(),
                    shape: self.params.get(id).shape().to_vec(),
                    values: self.params.get(id).data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Restore a model against a graph, checking schema and shapes.
    pub fn from_snapshot(snapshot: &ModelSnapshot, graph: &HinGraph) -> Result<Self> {
        let schema = SchemaInfo::of(graph);
        if schema != snapshot.schema {
            return Err(Error::Config(
                "snapshot schema does not match the provided graph".into(),
            ));
        }
        let mut model = DisenHan::new(graph, snapshot.config.clone(), 0)?;
        if model.params.len() != snapshot.params.len() {
            return Err(Error::Config(format!(
                "snapshot holds {} parameter tensors, model expects {}",
                snapshot.params.len(),
                model.params.len()
            )));
        }
        let ids: Vec<ParamId> = model.params.ids().collect();
        for (id, st) in ids.into_iter().zip(&snapshot.params) {
            if model.params.name(id) != st.name
                || model.params.get(id).shape() != st.shape.as_slice()
            {
                return Err(Error::Config(format!(
                    "snapshot tensor {} {:?} does not match model tensor {} {:?}",
                    st.name,
                    st.shape,
                    model.params.name(id),
                    model.params.get(id).shape()
                )));
            }
            let data = st.values.iter().map(|&v| F::of(v)).collect();
            *model.params.get_mut(id) = Tensor::new(st.shape.clone(), data)?;
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub schema: SchemaInfo,
    pub params: Vec<SnapshotTensor>,
}

/// K per-aspect unit vectors, as live tape values.
#[derive(Clone, Debug)]
pub struct DisenEmbedding {
    pub aspects: Vec<ValueId>,
}

/// Extracted (tape-free) embedding for scoring and export.
#[derive(Clone, Debug)]
pub struct NodeEmbedding<F> {
    pub aspects: Vec<Tensor<F>>,
}

impl<F: Real> NodeEmbedding<F> {
    pub fn concat(&self) -> Vec<F> {
        self.aspects.iter().flat_map(|a| a.data().iter().copied()).collect()
    }
}

/// Aspect-wise matching score between two extracted embeddings.
pub fn score_values<F: Real>(u: &NodeEmbedding<F>, v: &NodeEmbedding<F>) -> f64 {
    assert_eq!(u.aspects.len(), v.aspects.len(), "aspect counts differ");
    u.aspects
        .iter()
        .zip(&v.aspects)
        .map(|(a, b)| {
            a.data().iter().zip(b.data()).map(|(&x, &y)| (x * y).as_f64()).sum::<f64>()
        })
        .sum()
}

/// Sum of per-aspect inner products, on tape.
pub fn score<F: Real>(
    tape: &mut Tape<F>,
    u: &DisenEmbedding,
    v: &DisenEmbedding,
) -> Result<ValueId> {
    if u.aspects.len() != v.aspects.len() {
        return Err(Error::ShapeMismatch {
            op: "score".into(),
            lhs: vec![u.aspects.len()],
            rhs: vec![v.aspects.len()],
        });
    }
    let dots: Vec<ValueId> = u
        .aspects
        .iter()
        .zip(&v.aspects)
        .map(|(&a, &b)| tape.dot(a, b))
        .collect::<Result<_>>()?;
    tape.add_n(&dots)
}

/// Interaction probability from a matching score.
pub fn predict<F: Real>(tape: &mut Tape<F>, s: ValueId) -> ValueId {
    tape.sigmoid(s)
}

/// Neighbor group ready for one propagate call: per-aspect channel matrices
/// (fan-out rows each) plus the padding mask.
pub struct NeighborChannels {
    pub relation: RelId,
    pub channels: Vec<ValueId>,
    pub mask: Vec<bool>,
}

/// Output of one propagate call.
pub struct Propagated {
    pub aspects: Vec<ValueId>,
    /// Final-iteration aspect weights per relation, in input order.
    pub relation_weights: Vec<(RelId, ValueId)>,
    pub trace: Option<RoutingTrace>,
}

/// Per-iteration routing diagnostics.
#[derive(Clone, Debug, Default)]
pub struct RoutingTrace {
    pub iterations: Vec<RoutingIteration>,
}

#[derive(Clone, Debug)]
pub struct RoutingIteration {
    pub relation_weights: Vec<(RelId, Vec<f64>)>,
    pub aspect_norms: Vec<f64>,
    /// Mean over aspects of the L2 distance to the previous iterate.
    pub delta: f64,
}

impl RoutingIteration {
    /// Shannon entropy of each relation's aspect weights, a convergence
    /// proxy alongside `delta`: routing that commits to a major aspect
    /// drives this down from ln K.
    pub fn weight_entropy(&self) -> Vec<(RelId, f64)> {
        self.relation_weights
            .iter()
            .map(|(rel, r)| {
                let h = -r
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * p.ln())
                    .sum::<f64>();
                (*rel, h)
            })
            .collect()
    }
}

/// Mean final-iteration aspect weight per (layer, relation), accumulated over
/// every propagate call of every embedded target.
#[derive(Clone, Debug)]
pub struct AspectStats {
    sums: Vec<Vec<Vec<f64>>>,
    counts: Vec<Vec<usize>>,
}

impl AspectStats {
    pub fn new(layers: &[LayerSpec], relations: usize) -> Self {
        AspectStats {
            sums: layers.iter().map(|l| vec![vec![0.0; l.aspects]; relations]).collect(),
            counts: layers.iter().map(|_| vec![0; relations]).collect(),
        }
    }

    fn record(&mut self, layer: usize, rel: RelId, weights: &[f64]) {
        for (s, w) in self.sums[layer][rel.0].iter_mut().zip(weights) {
            *s += w;
        }
        self.counts[layer][rel.0] += 1;
    }

    /// Mean weights, None when the relation never appeared at this layer.
    pub fn mean(&self, layer: usize, rel: RelId) -> Option<Vec<f64>> {
        let n = self.counts[layer][rel.0];
        if n == 0 {
            return None;
        }
        Some(self.sums[layer][rel.0].iter().map(|s| s / n as f64).collect())
    }

    pub fn layers(&self) -> usize {
        self.sums.len()
    }

    pub fn relations(&self) -> usize {
        self.counts.first().map(|c| c.len()).unwrap_or(0)
    }

    pub fn merge(&mut self, other: &AspectStats) {
        for (layer, per_rel) in other.sums.iter().enumerate() {
            for (rel, sums) in per_rel.iter().enumerate() {
                for (s, v) in self.sums[layer][rel].iter_mut().zip(sums) {
                    *s += v;
                }
                self.counts[layer][rel] += other.counts[layer][rel];
            }
        }
    }
}

/// One forward evaluation context over a shared read-only model. Holds the
/// tape, optional dropout stream and diagnostics sinks.
pub struct ForwardPass<'a, F: Real> {
    model: &'a DisenHan<F>,
    pub tape: Tape<F>,
    dropout_rng: Option<StdRng>,
    collect_trace: bool,
    aspect_stats: Option<AspectStats>,
    /// Raw feature rows already sliced on this tape.
    feature_rows: HashMap<NodeId, ValueId>,
}

impl<'a, F: Real> ForwardPass<'a, F> {
    /// Evaluation-mode pass: no dropout.
    pub fn new(model: &'a DisenHan<F>) -> Self {
        ForwardPass {
            model,
            tape: Tape::new(),
            dropout_rng: None,
            collect_trace: false,
            aspect_stats: None,
            feature_rows: HashMap::new(),
        }
    }

    /// Training-mode pass: dropout drawn from the given seed when the model
    /// config enables it.
    pub fn training(model: &'a DisenHan<F>, dropout_seed: u64) -> Self {
        let mut fp = ForwardPass::new(model);
        if model.config.dropout > 0.0 {
            fp.dropout_rng = Some(StdRng::seed_from_u64(dropout_seed));
        }
        fp
    }

    pub fn with_trace(mut self) -> Self {
        self.collect_trace = true;
        self
    }

    pub fn with_aspect_stats(mut self) -> Self {
        self.aspect_stats =
            Some(AspectStats::new(&self.model.config.layers, self.model.num_relations()));
        self
    }

    pub fn aspect_stats(&self) -> Option<&AspectStats> {
        self.aspect_stats.as_ref()
    }

    pub fn take_aspect_stats(&mut self) -> Option<AspectStats> {
        self.aspect_stats.take()
    }

    /// Raw feature row of a node, registered once per tape.
    pub fn feature_row(&mut self, node: NodeId) -> Result<ValueId> {
        if let Some(&v) = self.feature_rows.get(&node) {
            return Ok(v);
        }
        let table = self.tape.param(&self.model.params, self.model.feature_tables[node.ty.0]);
        let row = self.tape.row(table, node.index)?;
        self.feature_rows.insert(node, row);
        Ok(row)
    }

    /// Project a feature vector into K normalized aspect channels.
    pub fn content_transform(
        &mut self,
        layer: usize,
        ty: NodeTypeId,
        x: ValueId,
    ) -> Result<Vec<ValueId>> {
        let spec = &self.model.config.layers[layer];
        let mut channels = Vec::with_capacity(spec.aspects);
        for k in 0..spec.aspects {
            let w = self.tape.param(&self.model.params, self.model.layers[layer].proj[ty.0][k]);
            let h = self.tape.matvec_t(w, x)?;
            let a = self.tape.relu(h);
            let mut c = self.tape.l2_normalize(a);
            if let Some(weights) = self.channel_dropout_weights(spec.sub_dim()) {
                c = self.tape.mul_const(c, weights)?;
            }
            channels.push(c);
        }
        Ok(channels)
    }

    /// Batched transform of stacked neighbor rows: one fan-out x sub_dim
    /// channel matrix per aspect.
    pub fn content_transform_rows(
        &mut self,
        layer: usize,
        ty: NodeTypeId,
        rows: ValueId,
    ) -> Result<Vec<ValueId>> {
        let spec = &self.model.config.layers[layer];
        let n_rows = self.tape.value(rows).rows();
        let mut channels = Vec::with_capacity(spec.aspects);
        for k in 0..spec.aspects {
            let w = self.tape.param(&self.model.params, self.model.layers[layer].proj[ty.0][k]);
            let h = self.tape.matmul(rows, w)?;
            let a = self.tape.relu(h);
            let mut c = self.tape.l2_normalize_rows(a)?;
            if let Some(weights) = self.channel_dropout_weights(n_rows * spec.sub_dim()) {
                c = self.tape.mul_const(c, weights)?;
            }
            channels.push(c);
        }
        Ok(channels)
    }

    fn channel_dropout_weights(&mut self, n: usize) -> Option<Vec<F>> {
        let p = self.model.config.dropout;
        let rng = self.dropout_rng.as_mut()?;
        let scale = F::of(1.0 / (1.0 - p));
        Some(
            (0..n)
                .map(|_| if rng.gen_bool(p) { F::zero() } else { scale })
                .collect(),
        )
    }

    /// Attention dropout: zero random kept weights, then renormalize the
    /// survivors to a unit sum. Draws that would kill every live entry are
    /// skipped.
    fn attention_dropout(&mut self, att: ValueId, mask: &[bool]) -> Result<ValueId> {
        let p = self.model.config.dropout;
        let Some(rng) = self.dropout_rng.as_mut() else { return Ok(att) };
        let keep: Vec<bool> = mask.iter().map(|&m| m && !rng.gen_bool(p)).collect();
        if !keep.iter().any(|&k| k) {
            return Ok(att);
        }
        let weights: Vec<F> =
            keep.iter().map(|&k| if k { F::one() } else { F::zero() }).collect();
        let kept = self.tape.mul_const(att, weights)?;
        let total = self.tape.sum(kept);
        self.tape.div_by(kept, total)
    }

    /// Importance of each grouped neighbor, one softmax per relation shared
    /// across aspects, then per-aspect weighted aggregation.
    ///
    /// Returns the per-aspect relation summaries and the attention weights.
    pub fn intra_relation_attention(
        &mut self,
        layer: usize,
        group: &NeighborChannels,
        z_prev: &[ValueId],
        r_prev: ValueId,
    ) -> Result<(Vec<ValueId>, ValueId)> {
        let spec = &self.model.config.layers[layer];
        let sub = spec.sub_dim();
        let alpha =
            self.tape.param(&self.model.params, self.model.layers[layer].attn[group.relation.0]);
        let alpha_target = self.tape.slice(alpha, 0, sub)?;
        let alpha_source = self.tape.slice(alpha, sub, sub)?;

        // e_k[s] = relu(alpha_t . z_k + alpha_s . c_{s,k}), per neighbor slot.
        let mut per_aspect_scores = Vec::with_capacity(spec.aspects);
        for k in 0..spec.aspects {
            let zdot = self.tape.dot(alpha_target, z_prev[k])?;
            let cpart = self.tape.matvec(group.channels[k], alpha_source)?;
            let pre = self.tape.add_scalar(cpart, zdot)?;
            per_aspect_scores.push(self.tape.relu(pre));
        }
        // Aspect-weighted neighbor importance, then one shared softmax.
        let mut weighted = Vec::with_capacity(spec.aspects);
        for (k, &scores) in per_aspect_scores.iter().enumerate() {
            let rk = self.tape.slice(r_prev, k, 1)?;
            weighted.push(self.tape.scale_by(scores, rk)?);
        }
        let combined = self.tape.add_n(&weighted)?;
        let mut attention = self.tape.masked_softmax(combined, &group.mask)?;
        attention = self.attention_dropout(attention, &group.mask)?;

        let mut summaries = Vec::with_capacity(spec.aspects);
        for k in 0..spec.aspects {
            let agg = self.tape.matvec_t(group.channels[k], attention)?;
            summaries.push(self.tape.relu(agg));
        }
        Ok((summaries, attention))
    }

    /// Aspect weights for one relation from its per-aspect summaries:
    /// softmax_k of q . tanh(W z_k). Also returns W z_k for reuse in the
    /// residual update.
    pub fn inter_relation_weights(
        &mut self,
        layer: usize,
        rel: RelId,
        summaries: &[ValueId],
    ) -> Result<(ValueId, Vec<ValueId>)> {
        let lp = &self.model.layers[layer];
        let w = self.tape.param(&self.model.params, lp.semantic_w(rel));
        let q = self.tape.param(&self.model.params, lp.sem[rel.0]);
        let mut scores = Vec::with_capacity(summaries.len());
        let mut transformed = Vec::with_capacity(summaries.len());
        for &z in summaries {
            let wz = self.tape.matvec(w, z)?;
            let t = self.tape.tanh(wz);
            scores.push(self.tape.dot(q, t)?);
            transformed.push(wz);
        }
        let stacked = self.tape.concat(&scores);
        let weights = self.tape.softmax(stacked)?;
        Ok((weights, transformed))
    }

    /// The routing loop for one target: iterate attention, relation
    /// weighting and the normalized residual update.
    pub fn propagate_node(
        &mut self,
        layer: usize,
        target_channels: &[ValueId],
        groups: &[NeighborChannels],
    ) -> Result<Propagated> {
        let spec = &self.model.config.layers[layer];
        let k_aspects = spec.aspects;
        assert_eq!(target_channels.len(), k_aspects, "one channel per aspect");

        let mut z: Vec<ValueId> = target_channels.to_vec();
        let mut trace =
            if self.collect_trace { Some(RoutingTrace::default()) } else { None };

        if groups.is_empty() {
            // Self-feature only; channels are already normalized.
            return Ok(Propagated { aspects: z, relation_weights: Vec::new(), trace });
        }

        let uniform = self.tape.constant(Tensor::vector(vec![
            F::of(1.0 / k_aspects as f64);
            k_aspects
        ]));
        let mut r: Vec<ValueId> = vec![uniform; groups.len()];
        let mut final_weights: Vec<(RelId, ValueId)> = Vec::new();

        for _iter in 0..spec.iters {
            let mut new_r = Vec::with_capacity(groups.len());
            let mut contributions: Vec<Vec<ValueId>> = vec![Vec::new(); k_aspects];
            for (gi, group) in groups.iter().enumerate() {
                let (summaries, _att) =
                    self.intra_relation_attention(layer, group, &z, r[gi])?;
                let (weights, transformed) =
                    self.inter_relation_weights(layer, group.relation, &summaries)?;
                for k in 0..k_aspects {
                    let rk = self.tape.slice(weights, k, 1)?;
                    contributions[k].push(self.tape.scale_by(transformed[k], rk)?);
                }
                new_r.push(weights);
            }
            let mut new_z = Vec::with_capacity(k_aspects);
            for k in 0..k_aspects {
                let mut terms = vec![target_channels[k]];
                terms.extend(&contributions[k]);
                let residual = self.tape.add_n(&terms)?;
                new_z.push(self.tape.l2_normalize(residual));
            }
            if let Some(trace) = trace.as_mut() {
                trace.iterations.push(self.trace_iteration(groups, &new_r, &z, &new_z));
            }
            z = new_z;
            r = new_r;
        }

        for (gi, group) in groups.iter().enumerate() {
            final_weights.push((group.relation, r[gi]));
        }
        if self.aspect_stats.is_some() {
            let extracted: Vec<(RelId, Vec<f64>)> = final_weights
                .iter()
                .map(|&(rel, rv)| {
                    (rel, self.tape.value(rv).data().iter().map(|v| v.as_f64()).collect())
                })
                .collect();
            if let Some(stats) = self.aspect_stats.as_mut() {
                for (rel, weights) in extracted {
                    stats.record(layer, rel, &weights);
                }
            }
        }
        Ok(Propagated { aspects: z, relation_weights: final_weights, trace })
    }

    fn trace_iteration(
        &self,
        groups: &[NeighborChannels],
        new_r: &[ValueId],
        old_z: &[ValueId],
        new_z: &[ValueId],
    ) -> RoutingIteration {
        let relation_weights = groups
            .iter()
            .zip(new_r)
            .map(|(g, &rv)| {
                (g.relation, self.tape.value(rv).data().iter().map(|v| v.as_f64()).collect())
            })
            .collect();
        let aspect_norms =
            new_z.iter().map(|&zid| self.tape.value(zid).norm2().as_f64()).collect();
        let delta = old_z
            .iter()
            .zip(new_z)
            .map(|(&a, &b)| {
                let (ta, tb) = (self.tape.value(a), self.tape.value(b));
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| {
                        let d = (x - y).as_f64();
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / new_z.len() as f64;
        RoutingIteration { relation_weights, aspect_norms, delta }
    }

    /// Embed the root of a computation tree: deepest nodes consume raw
    /// feature rows, every shallower level consumes concatenated channels of
    /// the level below, and the root keeps its per-aspect form.
    pub fn embed_root(&mut self, tree: &ComputationTree) -> Result<DisenEmbedding> {
        let depth = self.model.config.depth();
        if tree.depth() != depth {
            return Err(Error::Config(format!(
                "computation tree depth {} does not match the {} configured layers",
                tree.depth(),
                depth
            )));
        }

        // Input features per (depth, node) instance, starting as raw rows for
        // everything materialized anywhere in the tree.
        let mut inputs: HashMap<(usize, NodeId), ValueId> = HashMap::new();
        for d in 0..depth {
            for tn in &tree.levels[d] {
                let row = self.feature_row(tn.node)?;
                inputs.insert((d, tn.node), row);
            }
        }
        for node in tree.nodes_at_depth(depth) {
            let row = self.feature_row(node)?;
            inputs.insert((depth, node), row);
        }

        // Layers run deepest first; layer l embeds every instance at depths
        // 0..=l so the level above always finds its inputs.
        for l in (0..depth).rev() {
            let zero_row = self.tape.constant(Tensor::zeros(vec![self.model.config.in_dim(l)]));
            let mut outputs: HashMap<(usize, NodeId), ValueId> = HashMap::new();
            let mut root_embedding = None;
            for d in 0..=l {
                for tn in &tree.levels[d] {
                    let x_t = inputs[&(d, tn.node)];
                    let target_channels = self.content_transform(l, tn.node.ty, x_t)?;
                    let mut groups = Vec::with_capacity(tn.neighborhoods.len());
                    for nb in &tn.neighborhoods {
                        let rows: Vec<ValueId> = nb
                            .neighbor_ids
                            .iter()
                            .zip(&nb.mask)
                            .map(|(&nidx, &m)| {
                                if m {
                                    inputs[&(d + 1, NodeId::new(nb.src_type, nidx as usize))]
                                } else {
                                    zero_row
                                }
                            })
                            .collect();
                        let stacked = self.tape.stack_rows(&rows)?;
                        let channels =
                            self.content_transform_rows(l, nb.src_type, stacked)?;
                        groups.push(NeighborChannels {
                            relation: nb.relation,
                            channels,
                            mask: nb.mask.clone(),
                        });
                    }
                    let propagated = self.propagate_node(l, &target_channels, &groups)?;
                    if l == 0 && d == 0 {
                        root_embedding = Some(DisenEmbedding { aspects: propagated.aspects });
                    } else {
                        let concat = self.tape.concat(&propagated.aspects);
                        outputs.insert((d, tn.node), concat);
                    }
                }
            }
            if let Some(root) = root_embedding {
                return Ok(root);
            }
            inputs = outputs;
        }
        unreachable!("loop returns at layer 0");
    }

    /// Embed and extract plain tensors, for scoring outside the tape.
    pub fn embed_root_values(&mut self, tree: &ComputationTree) -> Result<NodeEmbedding<F>> {
        let emb = self.embed_root(tree)?;
        Ok(NodeEmbedding {
            aspects: emb.aspects.iter().map(|&a| self.tape.value(a).clone()).collect(),
        })
    }
}

/// Embed a set of nodes in evaluation mode, chunked so no single tape grows
/// unbounded. Trees are deterministic per (seed, node).
#[allow(clippy::too_many_arguments)]
pub fn embed_nodes<F: Real>(
    model: &DisenHan<F>,
    graph: &crate::hin::HinGraph,
    nodes: &[NodeId],
    fanouts: &crate::hin::Fanouts,
    tree_seed: u64,
    aspect_stats: Option<&mut AspectStats>,
) -> Result<HashMap<NodeId, NodeEmbedding<F>>> {
    const CHUNK: usize = 64;
    let depth = model.config.depth();
    let mut out = HashMap::with_capacity(nodes.len());
    let mut stats_sink = aspect_stats;
    for chunk in nodes.chunks(CHUNK) {
        let mut fp = ForwardPass::new(model);
        if stats_sink.is_some() {
            fp = fp.with_aspect_stats();
        }
        for &node in chunk {
            let tree = crate::hin::build_computation_tree(graph, node, depth, fanouts, tree_seed)?;
            let emb = fp.embed_root_values(&tree)?;
            out.insert(node, emb);
        }
        if let (Some(sink), Some(stats)) = (stats_sink.as_deref_mut(), fp.take_aspect_stats()) {
            sink.merge(&stats);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hin::{build_computation_tree, EdgeTypeId, Fanouts, HinGraph};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// user/item/brand graph small enough to hand-check.
    fn toy_graph() -> HinGraph {
        let t = |i| NodeTypeId(i);
        let e = |i| EdgeTypeId(i);
        let rel = |s, ed, d| MetaRelation { src: t(s), edge: e(ed), dst: t(d) };
        let ui = vec![(0u32, 0u32), (0, 1), (1, 0), (2, 1), (3, 0), (3, 1)];
        let ib = vec![(0u32, 0u32), (1, 1)];
        HinGraph::build(
            vec!["user".into(), "item".into(), "brand".into()],
            vec![4, 2, 2],
            vec!["rates".into(), "rated_by".into(), "brand_of".into()],
            vec![
                (rel(0, 0, 1), ui.clone()),
                (rel(1, 1, 0), ui.iter().map(|&(u, i)| (i, u)).collect()),
                (rel(2, 2, 1), ib.iter().map(|&(i, b)| (b, i)).collect()),
            ],
        )
        .unwrap()
    }

    fn config(aspects: Vec<usize>, out: usize, iters: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            layers: aspects.into_iter().map(|k| LayerSpec::new(k, out, iters)).collect(),
            per_relation_semantic: false,
            dropout: 0.0,
        }
    }

    #[test]
    fn config_rejects_indivisible_and_growing_aspects() {
        let mut c = config(vec![3], 10, 2, 8);
        assert!(c.validate().is_err()); // 10 % 3
        c.layers[0].out_dim = 9;
        assert!(c.validate().is_ok());

        let grow = config(vec![2, 5], 10, 2, 8);
        assert!(grow.validate().is_err()); // deeper layer has more aspects
        let shrink = config(vec![5, 5], 10, 2, 8);
        assert!(shrink.validate().is_ok());
    }

    #[test]
    fn content_transform_shapes_and_degenerate_aspect_count() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![1], 12, 2, 6), 1).unwrap();
        let mut fp = ForwardPass::new(&model);
        let x = fp.feature_row(NodeId::new(NodeTypeId(0), 0)).unwrap();
        let channels = fp.content_transform(0, NodeTypeId(0), x).unwrap();
        assert_eq!(channels.len(), 1);
        assert_eq!(fp.tape.value(channels[0]).len(), 12);
        assert!(close(fp.tape.value(channels[0]).norm2(), 1.0, 1e-12));

        let model5 = DisenHan::<f64>::new(&g, config(vec![5], 100, 2, 6), 1).unwrap();
        let mut fp5 = ForwardPass::new(&model5);
        let x = fp5.feature_row(NodeId::new(NodeTypeId(0), 0)).unwrap();
        let channels = fp5.content_transform(0, NodeTypeId(0), x).unwrap();
        assert_eq!(channels.len(), 5);
        assert!(channels.iter().all(|&c| fp5.tape.value(c).len() == 20));
    }

    #[test]
    fn zero_feature_vector_yields_zero_channels_through_the_guard() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![2], 8, 2, 6), 1).unwrap();
        let mut fp = ForwardPass::new(&model);
        let zero = fp.tape.constant(Tensor::zeros(vec![6]));
        let channels = fp.content_transform(0, NodeTypeId(0), zero).unwrap();
        for c in channels {
            assert!(fp.tape.value(c).data().iter().all(|&v| v == 0.0));
        }
    }

    /// Stack per-aspect channel matrices for hand-built neighbor features.
    fn build_group(
        fp: &mut ForwardPass<'_, f64>,
        layer: usize,
        rel: RelId,
        src_type: NodeTypeId,
        features: &[Vec<f64>],
        mask: Vec<bool>,
    ) -> NeighborChannels {
        let rows: Vec<ValueId> = features
            .iter()
            .map(|f| fp.tape.constant(Tensor::vector(f.clone())))
            .collect();
        let stacked = fp.tape.stack_rows(&rows).unwrap();
        let channels = fp.content_transform_rows(layer, src_type, stacked).unwrap();
        NeighborChannels { relation: rel, channels, mask }
    }

    #[test]
    fn single_neighbor_attention_weight_is_exactly_one() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![2], 8, 3, 6), 3).unwrap();
        let mut fp = ForwardPass::new(&model);
        let x = fp.feature_row(NodeId::new(NodeTypeId(1), 0)).unwrap();
        let z = fp.content_transform(0, NodeTypeId(1), x).unwrap();
        let group = build_group(
            &mut fp,
            0,
            RelId(0),
            NodeTypeId(0),
            &[vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4]],
            vec![true],
        );
        let r0 = fp.tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let (summaries, att) = fp.intra_relation_attention(0, &group, &z, r0).unwrap();
        assert_eq!(fp.tape.value(att).data(), &[1.0]);
        // Summary equals relu of the single channel row = the row itself
        // (channels are relu'd and normalized already, so non-negative).
        for (k, &s) in summaries.iter().enumerate() {
            let row = fp.tape.value(group.channels[k]).data().to_vec();
            assert_eq!(fp.tape.value(s).data(), row.as_slice());
        }
    }

    #[test]
    fn identical_neighbors_split_attention_and_match_single_neighbor_output() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![2], 8, 3, 6), 4).unwrap();
        let mut fp = ForwardPass::new(&model);
        let x = fp.feature_row(NodeId::new(NodeTypeId(1), 0)).unwrap();
        let z = fp.content_transform(0, NodeTypeId(1), x).unwrap();
        let feat = vec![0.7, -0.1, 0.2, 0.4, -0.3, 0.6];
        let single =
            build_group(&mut fp, 0, RelId(0), NodeTypeId(0), &[feat.clone()], vec![true]);
        let double = build_group(
            &mut fp,
            0,
            RelId(0),
            NodeTypeId(0),
            &[feat.clone(), feat.clone()],
            vec![true, true],
        );
        let r0 = fp.tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let (sum1, _) = fp.intra_relation_attention(0, &single, &z, r0).unwrap();
        let (sum2, att2) = fp.intra_relation_attention(0, &double, &z, r0).unwrap();
        assert_eq!(fp.tape.value(att2).data(), &[0.5, 0.5]);
        for (&a, &b) in sum1.iter().zip(&sum2) {
            for (x, y) in fp.tape.value(a).data().iter().zip(fp.tape.value(b).data()) {
                assert!(close(*x, *y, 1e-12));
            }
        }
    }

    #[test]
    fn permuting_neighbors_leaves_summaries_unchanged() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![3], 9, 3, 6), 5).unwrap();
        let mut fp = ForwardPass::new(&model);
        let x = fp.feature_row(NodeId::new(NodeTypeId(1), 1)).unwrap();
        let z = fp.content_transform(0, NodeTypeId(1), x).unwrap();
        let feats: Vec<Vec<f64>> = vec![
            vec![0.5, -0.2, 0.8, 0.1, 0.3, -0.6],
            vec![-0.4, 0.9, 0.05, 0.7, -0.2, 0.25],
            vec![0.1, 0.1, -0.9, 0.45, 0.65, -0.15],
        ];
        let fwd =
            build_group(&mut fp, 0, RelId(0), NodeTypeId(0), &feats, vec![true; 3]);
        let mut rev_feats = feats.clone();
        rev_feats.reverse();
        let rev =
            build_group(&mut fp, 0, RelId(0), NodeTypeId(0), &rev_feats, vec![true; 3]);
        let r0 = fp.tape.constant(Tensor::vector(vec![1.0 / 3.0; 3]));
        let (s1, _) = fp.intra_relation_attention(0, &fwd, &z, r0).unwrap();
        let (s2, _) = fp.intra_relation_attention(0, &rev, &z, r0).unwrap();
        for (&a, &b) in s1.iter().zip(&s2) {
            for (x, y) in fp.tape.value(a).data().iter().zip(fp.tape.value(b).data()) {
                assert!(close(*x, *y, 1e-10));
            }
        }
    }

    #[test]
    fn identical_summaries_get_uniform_relation_weights() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![3], 9, 3, 6), 6).unwrap();
        let mut fp = ForwardPass::new(&model);
        let s = fp.tape.constant(Tensor::vector(vec![0.4, 0.1, 0.9]));
        let (weights, _) = fp.inter_relation_weights(0, RelId(0), &[s, s, s]).unwrap();
        let w = fp.tape.value(weights).data();
        assert!(close(w[0], w[1], 1e-15) && close(w[1], w[2], 1e-15));
        assert!(close(w.iter().sum::<f64>(), 1.0, 1e-10));
        assert!(w.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn one_aspect_means_weight_exactly_one() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![1], 8, 3, 6), 7).unwrap();
        let mut fp = ForwardPass::new(&model);
        let s = fp.tape.constant(Tensor::vector(vec![0.2; 8]));
        let (weights, _) = fp.inter_relation_weights(0, RelId(0), &[s]).unwrap();
        assert_eq!(fp.tape.value(weights).data(), &[1.0]);
    }

    /// Independent hand computation of the one-iteration, one-aspect,
    /// one-neighbor closed form: z = normalize(c_t + W relu(c_s)).
    #[test]
    fn propagate_matches_hand_computed_closed_form() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![1], 4, 1, 6), 8).unwrap();
        let mut fp = ForwardPass::new(&model);
        let target = NodeId::new(NodeTypeId(1), 0);
        let x = fp.feature_row(target).unwrap();
        let c_t = fp.content_transform(0, NodeTypeId(1), x).unwrap();
        let neighbor_feat = vec![0.2, -0.6, 0.1, 0.8, 0.3, -0.4];
        let group = build_group(
            &mut fp,
            0,
            RelId(0),
            NodeTypeId(0),
            &[neighbor_feat.clone()],
            vec![true],
        );
        let out = fp.propagate_node(0, &c_t, &[group]).unwrap();

        // Oracle: plain-vector evaluation of the composed update rules.
        let matvec_t = |w: &Tensor<f64>, x: &[f64]| -> Vec<f64> {
            let (rows, cols) = (w.rows(), w.cols());
            let mut out = vec![0.0; cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j] += w.data()[i * cols + j] * x[i];
                }
            }
            out
        };
        let matvec = |w: &Tensor<f64>, x: &[f64]| -> Vec<f64> {
            let (rows, cols) = (w.rows(), w.cols());
            (0..rows)
                .map(|i| (0..cols).map(|j| w.data()[i * cols + j] * x[j]).sum())
                .collect()
        };
        let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let normalize = |v: Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n <= 1e-12 {
                v
            } else {
                v.into_iter().map(|x| x / n).collect()
            }
        };

        let w_item = model.params.get(model.layers[0].proj[1][0]).clone();
        let w_user = model.params.get(model.layers[0].proj[0][0]).clone();
        let w_shared = model.params.get(model.layers[0].semantic_w[0]).clone();
        let x_t = {
            let table = model.params.get(model.feature_tables[1]);
            table.data()[0..6].to_vec()
        };
        let c_t_hand = normalize(relu(matvec_t(&w_item, &x_t)));
        let c_s_hand = normalize(relu(matvec_t(&w_user, &neighbor_feat)));
        // Single neighbor: attention 1, relation weight 1 (one aspect).
        let z_rel = relu(c_s_hand);
        let wz = matvec(&w_shared, &z_rel);
        let expect =
            normalize(c_t_hand.iter().zip(&wz).map(|(a, b)| a + b).collect::<Vec<_>>());

        let got = fp.tape.value(out.aspects[0]).data();
        for (a, b) in got.iter().zip(&expect) {
            assert!(close(*a, *b, 1e-12), "{a} vs {b}");
        }
        // Diagnostics carry the final relation weights.
        assert_eq!(out.relation_weights.len(), 1);
        assert_eq!(fp.tape.value(out.relation_weights[0].1).data(), &[1.0]);
    }

    #[test]
    fn node_without_relations_keeps_its_own_channels() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![2], 8, 3, 6), 9).unwrap();
        let mut fp = ForwardPass::new(&model);
        let x = fp.feature_row(NodeId::new(NodeTypeId(0), 0)).unwrap();
        let c_t = fp.content_transform(0, NodeTypeId(0), x).unwrap();
        let out = fp.propagate_node(0, &c_t, &[]).unwrap();
        assert_eq!(out.aspects, c_t);
        assert!(out.relation_weights.is_empty());
    }

    #[test]
    fn routing_keeps_simplex_and_unit_norm_invariants() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![3], 9, 4, 6), 10).unwrap();
        let mut fp = ForwardPass::new(&model).with_trace();
        let target = NodeId::new(NodeTypeId(1), 0);
        let x = fp.feature_row(target).unwrap();
        let c_t = fp.content_transform(0, NodeTypeId(1), x).unwrap();
        let g1 = build_group(
            &mut fp,
            0,
            RelId(0),
            NodeTypeId(0),
            &[
                vec![0.1, 0.5, -0.3, 0.8, 0.2, -0.7],
                vec![-0.6, 0.4, 0.9, -0.1, 0.35, 0.15],
            ],
            vec![true, true],
        );
        let g2 = build_group(
            &mut fp,
            0,
            RelId(2),
            NodeTypeId(2),
            &[vec![0.45, -0.25, 0.65, 0.05, -0.85, 0.5]],
            vec![true],
        );
        let out = fp.propagate_node(0, &c_t, &[g1, g2]).unwrap();
        let trace = out.trace.unwrap();
        assert_eq!(trace.iterations.len(), 4);
        for iter in &trace.iterations {
            for (_, r) in &iter.relation_weights {
                assert!(close(r.iter().sum::<f64>(), 1.0, 1e-10));
                assert!(r.iter().all(|&v| v >= 0.0));
            }
            for &n in &iter.aspect_norms {
                assert!(close(n, 1.0, 1e-10));
            }
        }
    }

    #[test]
    fn padding_neutrality_appending_masked_slots_changes_nothing() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![2], 8, 3, 6), 11).unwrap();
        let mut fp = ForwardPass::new(&model);
        let x = fp.feature_row(NodeId::new(NodeTypeId(1), 1)).unwrap();
        let c_t = fp.content_transform(0, NodeTypeId(1), x).unwrap();
        let feats = vec![
            vec![0.3, -0.5, 0.7, 0.1, -0.2, 0.6],
            vec![0.9, 0.2, -0.4, 0.55, 0.05, -0.35],
        ];
        let tight = build_group(&mut fp, 0, RelId(0), NodeTypeId(0), &feats, vec![true; 2]);
        let mut padded_feats = feats.clone();
        padded_feats.push(vec![0.0; 6]);
        padded_feats.push(vec![0.0; 6]);
        let padded = build_group(
            &mut fp,
            0,
            RelId(0),
            NodeTypeId(0),
            &padded_feats,
            vec![true, true, false, false],
        );
        let out_a = fp.propagate_node(0, &c_t, &[tight]).unwrap();
        let out_b = fp.propagate_node(0, &c_t, &[padded]).unwrap();
        for (&a, &b) in out_a.aspects.iter().zip(&out_b.aspects) {
            for (x, y) in fp.tape.value(a).data().iter().zip(fp.tape.value(b).data()) {
                assert!(close(*x, *y, 1e-10));
            }
        }
    }

    /// With one aspect the routing cannot reweight anything; on inputs where
    /// attention has nothing to choose (a single neighbor) the loop is a
    /// fixed point from the first iteration.
    #[test]
    fn one_aspect_routing_is_iteration_invariant_when_attention_cannot_choose() {
        let g = toy_graph();
        let run = |iters: usize| {
            let model = DisenHan::<f64>::new(&g, config(vec![1], 8, iters, 6), 12).unwrap();
            let mut fp = ForwardPass::new(&model).with_trace();
            let x = fp.feature_row(NodeId::new(NodeTypeId(1), 0)).unwrap();
            let c_t = fp.content_transform(0, NodeTypeId(1), x).unwrap();
            let group = build_group(
                &mut fp,
                0,
                RelId(0),
                NodeTypeId(0),
                &[vec![0.2, -0.6, 0.1, 0.8, 0.3, -0.4]],
                vec![true],
            );
            let out = fp.propagate_node(0, &c_t, &[group]).unwrap();
            let z = fp.tape.value(out.aspects[0]).data().to_vec();
            let trace = out.trace.unwrap();
            (z, trace)
        };
        let (z1, _) = run(1);
        let (z5, trace5) = run(5);
        for (a, b) in z1.iter().zip(&z5) {
            assert!(close(*a, *b, 1e-10));
        }
        // r stays exactly one throughout.
        for iter in &trace5.iterations {
            for (_, r) in &iter.relation_weights {
                assert_eq!(r.as_slice(), &[1.0]);
            }
        }
    }

    #[test]
    fn weight_entropy_is_bounded_by_ln_k() {
        let iteration = RoutingIteration {
            relation_weights: vec![
                (RelId(0), vec![1.0 / 3.0; 3]),
                (RelId(1), vec![1.0, 0.0, 0.0]),
            ],
            aspect_norms: vec![1.0; 3],
            delta: 0.0,
        };
        let entropy = iteration.weight_entropy();
        assert!((entropy[0].1 - 3f64.ln()).abs() < 1e-12, "uniform hits ln K");
        assert_eq!(entropy[1].1, 0.0, "a committed relation has zero entropy");
    }

    #[test]
    fn routing_deltas_shrink_over_iterations() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![3], 9, 10, 6), 13).unwrap();
        let mut deltas_at_2 = 0.0;
        let mut deltas_at_10 = 0.0;
        let n = 20;
        for seed in 0..n {
            let mut fp = ForwardPass::new(&model).with_trace();
            let mut rng = StdRng::seed_from_u64(seed);
            let x = fp.feature_row(NodeId::new(NodeTypeId(1), 0)).unwrap();
            let c_t = fp.content_transform(0, NodeTypeId(1), x).unwrap();
            let feats: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let group =
                build_group(&mut fp, 0, RelId(0), NodeTypeId(0), &feats, vec![true; 4]);
            let out = fp.propagate_node(0, &c_t, &[group]).unwrap();
            let trace = out.trace.unwrap();
            deltas_at_2 += trace.iterations[1].delta;
            deltas_at_10 += trace.iterations[9].delta;
        }
        deltas_at_2 /= n as f64;
        deltas_at_10 /= n as f64;
        assert!(
            deltas_at_10 < deltas_at_2,
            "routing should settle: {deltas_at_10} !< {deltas_at_2}"
        );
        assert!(deltas_at_10 < 1e-2, "final delta {deltas_at_10}");
    }

    #[test]
    fn single_layer_forward_reduces_to_propagate_on_raw_features() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![2], 8, 3, 6), 14).unwrap();
        let root = NodeId::new(NodeTypeId(0), 0);
        let tree = build_computation_tree(&g, root, 1, &Fanouts::uniform(4, 1), 77).unwrap();

        let mut fp = ForwardPass::new(&model);
        let emb = fp.embed_root_values(&tree).unwrap();

        // Manual: transform root + neighbors, propagate once.
        let mut fp2 = ForwardPass::new(&model);
        let x = fp2.feature_row(root).unwrap();
        let c_t = fp2.content_transform(0, root.ty, x).unwrap();
        let nb = &tree.levels[0][0].neighborhoods[0];
        let rows: Vec<ValueId> = nb
            .real_nodes()
            .map(|n| fp2.feature_row(n).unwrap())
            .collect();
        let stacked = fp2.tape.stack_rows(&rows).unwrap();
        let channels = fp2.content_transform_rows(0, nb.src_type, stacked).unwrap();
        let group = NeighborChannels {
            relation: nb.relation,
            channels,
            mask: vec![true; rows.len()],
        };
        let out = fp2.propagate_node(0, &c_t, &[group]).unwrap();
        for (a, &b) in emb.aspects.iter().zip(&out.aspects) {
            for (x, y) in a.data().iter().zip(fp2.tape.value(b).data()) {
                assert!(close(*x, *y, 1e-10));
            }
        }
    }

    #[test]
    fn stacked_forward_dimensions_flow_between_layers() {
        let g = toy_graph();
        let cfg = ModelConfig {
            feature_dim: 6,
            layers: vec![LayerSpec::new(5, 100, 2), LayerSpec::new(5, 100, 2)],
            per_relation_semantic: false,
            dropout: 0.0,
        };
        assert_eq!(cfg.in_dim(0), 100);
        assert_eq!(cfg.in_dim(1), 6);
        let model = DisenHan::<f64>::new(&g, cfg, 15).unwrap();
        let root = NodeId::new(NodeTypeId(0), 3);
        let tree = build_computation_tree(&g, root, 2, &Fanouts::uniform(3, 2), 5).unwrap();
        let mut fp = ForwardPass::new(&model);
        let emb = fp.embed_root_values(&tree).unwrap();
        assert_eq!(emb.aspects.len(), 5);
        assert!(emb.aspects.iter().all(|a| a.len() == 20));
        for a in &emb.aspects {
            assert!(close(a.norm2(), 1.0, 1e-10));
        }
    }

    #[test]
    fn deep_projection_parameters_receive_gradient() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![2, 2], 8, 2, 6), 16).unwrap();
        let user = NodeId::new(NodeTypeId(0), 0);
        let item = NodeId::new(NodeTypeId(1), 0);
        let fan = Fanouts::uniform(3, 2);
        let ut = build_computation_tree(&g, user, 2, &fan, 9).unwrap();
        let it = build_computation_tree(&g, item, 2, &fan, 9).unwrap();
        let mut fp = ForwardPass::new(&model);
        let ue = fp.embed_root(&ut).unwrap();
        let ie = fp.embed_root(&it).unwrap();
        let s = score(&mut fp.tape, &ue, &ie).unwrap();
        let y = predict(&mut fp.tape, s);
        fp.tape.backward(y).unwrap();
        // Deepest-layer projection for the user type must be on the path.
        let deep = model.layers[1].proj[0][0];
        let grad = fp.tape.param_grad(&model.params, deep);
        assert!(grad.data().iter().any(|&v| v != 0.0), "deep projection got no gradient");
    }

    #[test]
    fn score_and_predict_examples() {
        let mut tape = Tape::<f64>::new();
        let k = 5;
        let mut aspects = Vec::new();
        for i in 0..k {
            let mut v = vec![0.0; 4];
            v[i % 4] = 1.0;
            aspects.push(tape.constant(Tensor::vector(v)));
        }
        let emb = DisenEmbedding { aspects: aspects.clone() };
        let s = score(&mut tape, &emb, &emb).unwrap();
        assert!(close(tape.value(s).item(), k as f64, 1e-12));
        let y = predict(&mut tape, s);
        assert!(close(tape.value(y).item(), 0.9933, 1e-4));

        // Orthogonal per-aspect vectors score zero, predicting one half.
        let e1 = DisenEmbedding {
            aspects: vec![tape.constant(Tensor::vector(vec![1.0, 0.0]))],
        };
        let e2 = DisenEmbedding {
            aspects: vec![tape.constant(Tensor::vector(vec![0.0, 1.0]))],
        };
        let s0 = score(&mut tape, &e1, &e2).unwrap();
        assert_eq!(tape.value(s0).item(), 0.0);
        let y0 = predict(&mut tape, s0);
        assert_eq!(tape.value(y0).item(), 0.5);

        // Mismatched aspect counts are rejected.
        let e3 = DisenEmbedding { aspects: vec![e1.aspects[0], e1.aspects[0]] };
        assert!(score(&mut tape, &e1, &e3).is_err());

        // Monotonicity of the logistic link.
        let lo = tape.scalar(0.3);
        let hi = tape.scalar(1.7);
        let ylo = predict(&mut tape, lo);
        let yhi = predict(&mut tape, hi);
        assert!(tape.value(ylo).item() < tape.value(yhi).item());
    }

    #[test]
    fn forward_is_deterministic_for_a_fixed_seed() {
        let g = toy_graph();
        let run = || {
            let model = DisenHan::<f64>::new(&g, config(vec![2, 2], 8, 3, 6), 21).unwrap();
            let tree = build_computation_tree(
                &g,
                NodeId::new(NodeTypeId(0), 1),
                2,
                &Fanouts::uniform(3, 2),
                33,
            )
            .unwrap();
            let mut fp = ForwardPass::new(&model);
            fp.embed_root_values(&tree).unwrap().concat()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn snapshot_round_trips_and_rejects_mismatched_schema() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![2], 8, 3, 6), 22).unwrap();
        let snap = model.snapshot();
        let restored = DisenHan::<f64>::from_snapshot(&snap, &g).unwrap();
        for (a, b) in model.params.ids().zip(restored.params.ids()) {
            assert_eq!(model.params.get(a), restored.params.get(b));
        }
        // A different graph is refused.
        let other = {
            let t = |i| NodeTypeId(i);
            let e = |i| EdgeTypeId(i);
            let rel = MetaRelation { src: t(0), edge: e(0), dst: t(1) };
            HinGraph::build(
                vec!["user".into(), "item".into()],
                vec![4, 2],
                vec!["rates".into(), "unused".into()],
                vec![(rel, vec![(0, 0)])],
            )
            .unwrap()
        };
        assert!(DisenHan::<f64>::from_snapshot(&snap, &other).is_err());
    }

    #[test]
    fn tree_depth_must_match_layer_count() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![2], 8, 3, 6), 23).unwrap();
        let tree = build_computation_tree(
            &g,
            NodeId::new(NodeTypeId(0), 0),
            2,
            &Fanouts::uniform(3, 2),
            1,
        )
        .unwrap();
        let mut fp = ForwardPass::new(&model);
        assert!(fp.embed_root(&tree).is_err());
    }

    #[test]
    fn aspect_stats_average_final_relation_weights() {
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![2], 8, 3, 6), 24).unwrap();
        let mut fp = ForwardPass::new(&model).with_aspect_stats();
        for item in 0..2 {
            let tree = build_computation_tree(
                &g,
                NodeId::new(NodeTypeId(1), item),
                1,
                &Fanouts::uniform(4, 1),
                7,
            )
            .unwrap();
            fp.embed_root(&tree).unwrap();
        }
        let stats = fp.take_aspect_stats().unwrap();
        // Items see the rates relation (RelId 0) and brand_of (RelId 2).
        let mean = stats.mean(0, RelId(0)).unwrap();
        assert!(close(mean.iter().sum::<f64>(), 1.0, 1e-10));
        assert!(stats.mean(0, RelId(1)).is_none(), "no user was embedded");
    }

    /// The full-model finite-difference check lives in the acceptance suite;
    /// this smaller one covers a single propagate through every update rule.
    #[test]
    fn propagate_gradients_match_finite_differences() {
        use crate::gradcheck::grad_check;
        let g = toy_graph();
        let model = DisenHan::<f64>::new(&g, config(vec![2], 4, 2, 6), 25).unwrap();
        let tree = build_computation_tree(
            &g,
            NodeId::new(NodeTypeId(1), 0),
            1,
            &Fanouts::uniform(3, 1),
            13,
        )
        .unwrap();
        let probe: Vec<f64> = vec![0.7, -0.3, 0.45, 0.2];
        let mut check_params = model.params.clone();
        let report = grad_check(
            &mut check_params,
            |p, tape| {
                // View the same architecture over the perturbed parameters.
                let mut m = model.clone();
                m.params = p.clone();
                let mut fp = ForwardPass::new(&m);
                let emb = fp.embed_root(&tree)?;
                let flat = fp.tape.concat(&emb.aspects);
                let c = fp.tape.constant(Tensor::vector(probe.clone()));
                let loss = fp.tape.dot(flat, c)?;
                *tape = std::mem::take(&mut fp.tape);
                Ok(loss)
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
