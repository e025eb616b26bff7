//! Synthetic heterogeneous datasets with planted aspects.
//!
//! Every user and item carries a latent per-aspect affinity vector. Context
//! entity types (brand-like, category-like) each influence exactly one
//! planted aspect: an item's affinity on that aspect is inherited from its
//! linked entities plus noise, so neighbors under that relation cluster in
//! that aspect's subspace. Interactions are Bernoulli draws of a logistic in
//! the aspect-summed affinity, with the intercept calibrated to a target
//! density. The exported ground truth (planted aspect per relation, latent
//! vectors) lets tests check both aspect recovery and a scoring ceiling.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{
    DatasetManifest, Interaction, InteractionLog, NodeTypeDecl, RelationDecl,
};
use crate::error::{Error, Result};
use crate::hin::{EdgeTypeId, HinGraph, MetaRelation, NodeTypeId};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContextSpec {
    pub name: String,
    pub count: usize,
    /// Which latent aspect this relation's entities drive.
    pub planted_aspect: usize,
    pub links_per_item: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// True latent aspect count K*.
    pub true_aspects: usize,
    pub users: usize,
    pub items: usize,
    pub contexts: Vec<ContextSpec>,
    /// Std of the noise added to context-driven affinities.
    pub noise: f64,
    /// Target mean interactions per user.
    pub interactions_per_user: f64,
    /// Logistic slope on the normalized affinity score.
    pub sharpness: f64,
    /// Additive boost on each user's dominant aspect; higher values make
    /// preferences more single-minded.
    pub user_concentration: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.true_aspects == 0 {
            return Err(Error::Config("true_aspects must be at least 1".into()));
        }
        if self.users == 0 || self.items == 0 {
            return Err(Error::Config("users and items must be positive".into()));
        }
        if self.interactions_per_user <= 0.0 {
            return Err(Error::Config("zero interaction density is degenerate".into()));
        }
        if self.interactions_per_user >= self.items as f64 {
            return Err(Error::Config(
                "interaction density saturates the item catalogue".into(),
            ));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        for c in &self.contexts {
            if c.planted_aspect >= self.true_aspects {
                return Err(Error::Config(format!(
                    "context {:?} plants aspect {} but only {} exist",
                    c.name, c.planted_aspect, self.true_aspects
                )));
            }
            if c.count == 0 || c.links_per_item == 0 {
                return Err(Error::Config(format!("context {:?} has a zero size", c.name)));
            }
        }
        Ok(())
    }

    /// The three-aspect benchmark configuration: ~2000 users, ~1000 items,
    /// brands driving aspect 1 and categories driving aspect 2.
    pub fn k3_benchmark() -> Self {
        SyntheticSpec {
            true_aspects: 3,
            users: 2000,
            items: 1000,
            contexts: vec![
                ContextSpec {
                    name: "brand".into(),
                    count: 50,
                    planted_aspect: 1,
                    links_per_item: 1,
                },
                ContextSpec {
                    name: "category".into(),
                    count: 30,
                    planted_aspect: 2,
                    links_per_item: 1,
                },
            ],
            noise: 0.15,
            interactions_per_user: 14.0,
            sharpness: 4.0,
            user_concentration: 1.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlantedRelation {
    /// Edge name of the context-to-item relation.
    pub edge: String,
    pub aspect: usize,
}

/// What the generator knows and the model is supposed to rediscover.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_aspects: usize,
    pub planted: Vec<PlantedRelation>,
    pub user_latents: Vec<Vec<f64>>,
    pub item_latents: Vec<Vec<f64>>,
    pub intercept: f64,
    pub sharpness: f64,
}

impl GroundTruth {
    /// Latent-affinity score; ranking by it is the oracle scorer.
    pub fn oracle_score(&self, user: u32, item: u32) -> f64 {
        self.user_latents[user as usize]
            .iter()
            .zip(&self.item_latents[item as usize])
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn normal(rng: &mut StdRng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generate a synthetic HIN with its interaction log and ground truth.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(HinGraph, InteractionLog, GroundTruth)> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let k = spec.true_aspects;

    // User latents: iid normal with a boosted dominant aspect.
    let mut user_latents = Vec::with_capacity(spec.users);
    for _ in 0..spec.users {
        let mut p: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let dominant = rng.gen_range(0..k);
        p[dominant] += spec.user_concentration * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        user_latents.push(p);
    }

    // Context entity values and item links.
    let mut context_values: Vec<Vec<f64>> = Vec::with_capacity(spec.contexts.len());
    let mut context_links: Vec<Vec<Vec<u32>>> = Vec::with_capacity(spec.contexts.len());
    for c in &spec.contexts {
        context_values.push((0..c.count).map(|_| normal(&mut rng)).collect());
        let mut links = Vec::with_capacity(spec.items);
        for _ in 0..spec.items {
            let mut chosen: Vec<u32> = Vec::with_capacity(c.links_per_item);
            while chosen.len() < c.links_per_item.min(c.count) {
                let pick = rng.gen_range(0..c.count) as u32;
                if !chosen.contains(&pick) {
                    chosen.push(pick);
                }
            }
            links.push(chosen);
        }
        context_links.push(links);
    }

    // Item latents: planted aspects inherit the mean linked entity value;
    // unplanted aspects are idiosyncratic.
    let mut item_latents = vec![vec![0.0f64; k]; spec.items];
    let mut planted_mask = vec![false; k];
    for c in &spec.contexts {
        planted_mask[c.planted_aspect] = true;
    }
    for (i, latent) in item_latents.iter_mut().enumerate() {
        for (a, l) in latent.iter_mut().enumerate() {
            if !planted_mask[a] {
                *l = normal(&mut rng);
            } else {
                let mut total = 0.0;
                for (ci, c) in spec.contexts.iter().enumerate() {
                    if c.planted_aspect != a {
                        continue;
                    }
                    let links = &context_links[ci][i];
                    let mean: f64 = links
                        .iter()
                        .map(|&e| context_values[ci][e as usize])
                        .sum::<f64>()
                        / links.len() as f64;
                    total += mean;
                }
                *l = total + spec.noise * normal(&mut rng);
            }
        }
    }

    // Calibrate the logistic intercept so the expected density matches.
    let scale = spec.sharpness / (k as f64).sqrt();
    let mut dots = Vec::with_capacity(spec.users * spec.items);
    for p in &user_latents {
        for q in &item_latents {
            dots.push(scale * p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    let target = spec.interactions_per_user / spec.items as f64;
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let mean: f64 =
            dots.iter().map(|&d| sigmoid(d + mid)).sum::<f64>() / dots.len() as f64;
        if mean < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let intercept = 0.5 * (lo + hi);

    // Bernoulli interactions, then random timestamps.
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for (u, _) in user_latents.iter().enumerate() {
        for v in 0..spec.items {
            let d = dots[u * spec.items + v];
            if rng.gen_bool(sigmoid(d + intercept).clamp(0.0, 1.0)) {
                pairs.push((u as u32, v as u32));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data("synthetic draw produced no interactions".into()));
    }
    pairs.shuffle(&mut rng);
    let records: Vec<Interaction> = pairs
        .iter()
        .enumerate()
        .map(|(ts, &(user, item))| Interaction { user, item, ts: ts as i64 })
        .collect();

    // Assemble the graph: user/item plus one type per context, with explicit
    // inverses everywhere.
    let mut type_names = vec!["user".to_string(), "item".to_string()];
    let mut node_counts = vec![spec.users, spec.items];
    for c in &spec.contexts {
        type_names.push(c.name.clone());
        node_counts.push(c.count);
    }
    let mut edge_names = vec!["rates".to_string(), "rated_by".to_string()];
    let user_ty = NodeTypeId(0);
    let item_ty = NodeTypeId(1);
    let mut relations: Vec<(MetaRelation, Vec<(u32, u32)>)> = vec![
        (
            MetaRelation { src: user_ty, edge: EdgeTypeId(0), dst: item_ty },
            pairs.clone(),
        ),
        (
            MetaRelation { src: item_ty, edge: EdgeTypeId(1), dst: user_ty },
            pairs.iter().map(|&(u, v)| (v, u)).collect(),
        ),
    ];
    let mut planted = Vec::with_capacity(spec.contexts.len());
    for (ci, c) in spec.contexts.iter().enumerate() {
        let ctx_ty = NodeTypeId(2 + ci);
        let fwd_edge = EdgeTypeId(edge_names.len());
        edge_names.push(format!("{}_of", c.name));
        let inv_edge = EdgeTypeId(edge_names.len());
        edge_names.push(format!("has_{}", c.name));
        let mut ctx_to_item = Vec::new();
        for (i, links) in context_links[ci].iter().enumerate() {
            for &e in links {
                ctx_to_item.push((e, i as u32));
            }
        }
        relations.push((
            MetaRelation { src: ctx_ty, edge: fwd_edge, dst: item_ty },
            ctx_to_item.clone(),
        ));
        relations.push((
            MetaRelation { src: item_ty, edge: inv_edge, dst: ctx_ty },
            ctx_to_item.iter().map(|&(e, i)| (i, e)).collect(),
        ));
        planted.push(PlantedRelation {
            edge: format!("{}_of", c.name),
            aspect: c.planted_aspect,
        });
    }

    let graph = HinGraph::build(type_names, node_counts, edge_names, relations)?;
    let truth = GroundTruth {
        true_aspects: k,
        planted,
        user_latents,
        item_latents,
        intercept,
        sharpness: spec.sharpness,
    };
    Ok((graph, InteractionLog { records }, truth))
}

/// Generate and write a dataset directory: relation TSVs, a manifest, and
/// the ground truth. `load_dataset` on the manifest reproduces the graph.
pub fn write_synthetic_dataset(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<()> {
    let (graph, log, truth) = generate_synthetic(spec, seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let mut interactions = String::new();
    for r in &log.records {
        interactions.push_str(&format!("{}\t{}\t{}\n", r.user, r.item, r.ts));
    }
    let ipath = dir.join("interactions.tsv");
    fs::write(&ipath, interactions).map_err(|e| Error::io(ipath.display().to_string(), e))?;

    let mut relations = vec![
        RelationDecl {
            src: "user".into(),
            edge: "rates".into(),
            dst: "item".into(),
            file: "interactions.tsv".into(),
            reverse: false,
        },
        RelationDecl {
            src: "item".into(),
            edge: "rated_by".into(),
            dst: "user".into(),
            file: "interactions.tsv".into(),
            reverse: true,
        },
    ];
    for c in &spec.contexts {
        // One file per context holding (item, entity) lines.
        let rel = graph
            .rel_id(&MetaRelation {
                src: NodeTypeId(1),
                edge: graph.edge_id(&format!("has_{}", c.name)).expect("edge exists"),
                dst: graph.type_id(&c.name).expect("type exists"),
            })
            .expect("relation exists");
        let ctx_ty = graph.relation(rel).dst;
        let mut lines = String::new();
        for e in 0..graph.node_count(ctx_ty) {
            for &item in graph
                .neighbors(crate::hin::NodeId::new(ctx_ty, e), rel)
                .expect("relation targets context")
            {
                lines.push_str(&format!("{}\t{}\n", item, e));
            }
        }
        let fname = format!("{}_links.tsv", c.name);
        let fpath = dir.join(&fname);
        fs::write(&fpath, lines).map_err(|e| Error::io(fpath.display().to_string(), e))?;
        relations.push(RelationDecl {
            src: c.name.clone(),
            edge: format!("{}_of", c.name),
            dst: "item".into(),
            file: fname.clone(),
            reverse: true,
        });
        relations.push(RelationDecl {
            src: "item".into(),
            edge: format!("has_{}", c.name),
            dst: c.name.clone(),
            file: fname,
            reverse: false,
        });
    }

    let mut node_types = vec![
        NodeTypeDecl { name: "user".into(), count: spec.users },
        NodeTypeDecl { name: "item".into(), count: spec.items },
    ];
    for c in &spec.contexts {
        node_types.push(NodeTypeDecl { name: c.name.clone(), count: c.count });
    }
    let manifest = DatasetManifest {
        node_types,
        relations,
        interaction_relation: "rates".into(),
        core_filter: vec![],
    };
    manifest.write(&dir.join("manifest.json"))?;
    truth.write(&dir.join("ground_truth.json"))?;
    Ok(())
}
