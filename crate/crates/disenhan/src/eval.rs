//! Sampled-negatives top-N ranking evaluation.
//!
//! Per user with at least one positive in the chosen split, all of that
//! user's split positives are ranked jointly against one shared draw of
//! sampled negatives (items the user never touched in any split). Ranking is
//! by descending score with ties broken by ascending item id, then Prec@N,
//! Recall@N and binary-gain NDCG@N are averaged over users.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, UserItemIndex};
use crate::error::{Error, Result};
use crate::hin::{Fanouts, HinGraph, NodeId, NodeTypeId};
use crate::model::{embed_nodes, score_values, AspectStats, DisenHan};
use crate::tensor::Real;

/// One user's candidate slate: split positives plus sampled negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub user: u32,
    pub items: Vec<u32>,
    pub relevant: Vec<bool>,
    /// How many negatives short of the request the eligible pool ran.
    pub shortfall: usize,
}

impl RankedList {
    pub fn positives(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }
}

/// Candidate slates for a whole split, with the sampling protocol recorded.
#[derive(Clone, Debug)]
pub struct EvalLists {
    pub split: Split,
    pub n_negatives: usize,
    pub seed: u64,
    pub lists: Vec<RankedList>,
}

/// Build per-user candidate lists: the user's split positives plus
/// `n_neg` uniform negatives drawn without replacement from items the user
/// has no interaction with in any split. Users are processed in ascending id
/// order from one seeded stream, so lists are reproducible.
pub fn build_eval_lists(
    index: &UserItemIndex,
    split: Split,
    n_neg: usize,
    seed: u64,
) -> Result<EvalLists> {
    let part = index.part(split);
    if part.iter().all(|s| s.is_empty()) {
        return Err(Error::Data(format!("split {split:?} holds no interactions")));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut lists = Vec::new();
    for (user, positives) in part.iter().enumerate() {
        if positives.is_empty() {
            continue;
        }
        let excluded = &index.any[user];
        let eligible: Vec<u32> =
            (0..index.n_items as u32).filter(|i| !excluded.contains(i)).collect();
        let take = n_neg.min(eligible.len());
        let negatives: Vec<u32> = if take == eligible.len() {
            eligible
        } else {
            rand::seq::index::sample(&mut rng, eligible.len(), take)
                .into_iter()
                .map(|i| eligible[i])
                .collect()
        };
        let mut items: Vec<u32> = positives.iter().copied().collect();
        items.sort_unstable();
        let mut relevant = vec![true; items.len()];
        items.extend_from_slice(&negatives);
        relevant.extend(vec![false; negatives.len()]);
        lists.push(RankedList {
            user: user as u32,
            items,
            relevant,
            shortfall: n_neg - take,
        });
    }
    Ok(EvalLists { split, n_negatives: n_neg, seed, lists })
}

/// Candidate order after ranking: descending score, ties by ascending item
/// id.
fn ranked_order(items: &[u32], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be comparable")
            .then_with(|| items[a].cmp(&items[b]))
    });
    order
}

fn hits_at(list: &RankedList, scores: &[f64], n: usize) -> usize {
    ranked_order(&list.items, scores)
        .into_iter()
        .take(n)
        .filter(|&i| list.relevant[i])
        .count()
}

pub fn precision_at(list: &RankedList, scores: &[f64], n: usize) -> Result<f64> {
    check_metric_inputs(list, scores, n)?;
    Ok(hits_at(list, scores, n) as f64 / n as f64)
}

pub fn recall_at(list: &RankedList, scores: &[f64], n: usize) -> Result<f64> {
    check_metric_inputs(list, scores, n)?;
    Ok(hits_at(list, scores, n) as f64 / list.positives() as f64)
}

/// Binary-gain NDCG with the 1/log2(rank+1) discount; the ideal ranking
/// packs min(N, #positives) hits at the top.
pub fn ndcg_at(list: &RankedList, scores: &[f64], n: usize) -> Result<f64> {
    check_metric_inputs(list, scores, n)?;
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked_order(&list.items, scores)
        .into_iter()
        .take(n)
        .enumerate()
        .filter(|&(_, i)| list.relevant[i])
        .map(|(at, _)| discount(at + 1))
        .sum();
    let ideal: f64 = (1..=n.min(list.positives())).map(discount).sum();
    Ok(dcg / ideal)
}

fn check_metric_inputs(list: &RankedList, scores: &[f64], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("metric cutoff N must be positive".into()));
    }
    if list.items.is_empty() || list.positives() == 0 {
        return Err(Error::Data(format!("user {} has an empty candidate list", list.user)));
    }
    if scores.len() != list.items.len() {
        return Err(Error::ShapeMismatch {
            op: "metric scores".into(),
            lhs: vec![scores.len()],
            rhs: vec![list.items.len()],
        });
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: u32,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub n_negatives: usize,
    pub seed: u64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_ndcg: f64,
    pub shortfall_users: usize,
    pub users: Vec<UserMetrics>,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "label,n,n_negatives,seed,users,mean_precision,mean_recall,mean_ndcg"
    }

    /// One flat row for sweep tooling.
    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{label},{},{},{},{},{},{},{}",
            self.n,
            self.n_negatives,
            self.seed,
            self.users.len(),
            self.mean_precision,
            self.mean_recall,
            self.mean_ndcg
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Score every candidate with `scorer` and aggregate per-user metrics by
/// unweighted mean.
pub fn evaluate<S>(eval: &EvalLists, scorer: S, n: usize) -> Result<MetricReport>
where
    S: Fn(u32, u32) -> f64,
{
    if eval.lists.is_empty() {
        return Err(Error::Data("no users to evaluate".into()));
    }
    let mut users = Vec::with_capacity(eval.lists.len());
    let (mut sp, mut sr, mut sn) = (0.0, 0.0, 0.0);
    let mut shortfall_users = 0;
    for list in &eval.lists {
        let scores: Vec<f64> =
            list.items.iter().map(|&i| scorer(list.user, i)).collect();
        let precision = precision_at(list, &scores, n)?;
        let recall = recall_at(list, &scores, n)?;
        let ndcg = ndcg_at(list, &scores, n)?;
        sp += precision;
        sr += recall;
        sn += ndcg;
        if list.shortfall > 0 {
            shortfall_users += 1;
        }
        users.push(UserMetrics { user: list.user, precision, recall, ndcg });
    }
    let count = users.len() as f64;
    Ok(MetricReport {
        n,
        n_negatives: eval.n_negatives,
        seed: eval.seed,
        mean_precision: sp / count,
        mean_recall: sr / count,
        mean_ndcg: sn / count,
        shortfall_users,
        users,
    })
}

/// Evaluate a trained model: embed every user and candidate item once, then
/// score slates with aspect-wise inner products. Optionally accumulates
/// per-relation aspect weights over all embedded targets.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model<F: Real>(
    model: &DisenHan<F>,
    graph: &HinGraph,
    user_type: NodeTypeId,
    item_type: NodeTypeId,
    eval: &EvalLists,
    n: usize,
    fanouts: &Fanouts,
    tree_seed: u64,
    aspect_stats: Option<&mut AspectStats>,
) -> Result<MetricReport> {
    let mut users: Vec<NodeId> =
        eval.lists.iter().map(|l| NodeId::new(user_type, l.user as usize)).collect();
    users.dedup();
    let mut item_set: Vec<u32> = eval
        .lists
        .iter()
        .flat_map(|l| l.items.iter().copied())
        .collect();
    item_set.sort_unstable();
    item_set.dedup();
    let items: Vec<NodeId> =
        item_set.iter().map(|&i| NodeId::new(item_type, i as usize)).collect();

    let mut all_nodes = users;
    all_nodes.extend(items);
    let embeddings = embed_nodes(model, graph, &all_nodes, fanouts, tree_seed, aspect_stats)?;

    let lookup: HashMap<NodeId, _> = embeddings;
    evaluate(
        eval,
        |u, i| {
            let ue = &lookup[&NodeId::new(user_type, u as usize)];
            let ie = &lookup[&NodeId::new(item_type, i as usize)];
            score_values(ue, ie)
        },
        n,
    )
}
