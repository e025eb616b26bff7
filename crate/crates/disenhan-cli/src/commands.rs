//! The command implementations, generic over scalar precision.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use disenhan::data::{chronological_split, load_dataset, Dataset, Split, SplitLog, UserItemIndex};
use disenhan::eval::{build_eval_lists, evaluate_model, MetricReport};
use disenhan::hin::{Fanouts, NodeId, RelId};
use disenhan::model::{
    embed_nodes, AspectStats, DisenHan, ModelSnapshot,
};
use disenhan::tensor::Real;
use disenhan::train::{fit, FitResult, TrainData};

use crate::config::RunConfig;

fn mix(seed: u64, salt: u64) -> u64 {
    let mut h = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

pub struct PreparedData {
    pub dataset: Dataset,
    pub split: SplitLog,
    pub index: UserItemIndex,
}

pub fn prepare(config: &RunConfig) -> Result<PreparedData> {
    let dataset = load_dataset(&config.manifest)?;
    let split = chronological_split(&dataset.log, config.split_fractions)?;
    let index = UserItemIndex::build(
        &split,
        dataset.graph.node_count(dataset.user_type),
        dataset.graph.node_count(dataset.item_type),
    );
    Ok(PreparedData { dataset, split, index })
}

fn train_data<'a>(prep: &'a PreparedData) -> TrainData<'a> {
    TrainData {
        graph: &prep.dataset.graph,
        split: &prep.split,
        index: &prep.index,
        user_type: prep.dataset.user_type,
        item_type: prep.dataset.item_type,
    }
}

pub struct TrainArtifacts {
    pub result: FitResult,
    pub snapshot: ModelSnapshot,
}

/// Train a fresh model and write snapshot + line-delimited training log.
pub fn cmd_train<F: Real>(config: &RunConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    let prep = prepare(config)?;
    let data = train_data(&prep);
    let mut model =
        DisenHan::<F>::new(&prep.dataset.graph, config.model.clone(), mix(config.seed, 0x0DE1))?;
    let result = fit(&data, &mut model, &config.train)?;
    let snapshot = model.snapshot();

    config.write_resolved(out_dir)?;
    let snap_path = out_dir.join("snapshot.json");
    fs::write(&snap_path, serde_json::to_string(&snapshot)?)
        .with_context(|| format!("writing {}", snap_path.display()))?;
    let log_path = out_dir.join("training_log.jsonl");
    let mut log_file = fs::File::create(&log_path)
        .with_context(|| format!("writing {}", log_path.display()))?;
    for record in &result.log {
        writeln!(log_file, "{}", serde_json::to_string(record)?)?;
    }
    if result.saturated_users > 0 {
        eprintln!(
            "warning: {} positives skipped (user interacted with every item)",
            result.saturated_users
        );
    }
    println!(
        "trained {} epochs; best validation recall@{} = {:.4} at epoch {}",
        result.log.len(),
        config.train.topn,
        result.best_recall,
        result.best_epoch
    );
    Ok(TrainArtifacts { result, snapshot })
}

pub fn read_snapshot(path: &Path) -> Result<ModelSnapshot> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("snapshot not found: {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn restore<F: Real>(snapshot: &ModelSnapshot, config: &RunConfig, prep: &PreparedData) -> Result<DisenHan<F>> {
    if snapshot.config != config.model {
        bail!(
            "snapshot model configuration {:?} does not match the run configuration {:?}",
            snapshot.config,
            config.model
        );
    }
    Ok(DisenHan::from_snapshot(snapshot, &prep.dataset.graph)?)
}

/// Evaluate a snapshot on the test (or validation) split; writes the JSON
/// report and a one-row CSV.
pub fn cmd_evaluate<F: Real>(
    snapshot: &ModelSnapshot,
    config: &RunConfig,
    split: Split,
    out_dir: &Path,
) -> Result<MetricReport> {
    let prep = prepare(config)?;
    let model: DisenHan<F> = restore(snapshot, config, &prep)?;
    let lists = build_eval_lists(
        &prep.index,
        split,
        config.train.eval_negatives,
        mix(config.seed, 0xEA72),
    )?;
    let report = evaluate_model(
        &model,
        &prep.dataset.graph,
        prep.dataset.user_type,
        prep.dataset.item_type,
        &lists,
        config.train.topn,
        &config.train.fanout_plan(),
        mix(config.seed, 0xE7A2),
        None,
    )?;

    config.write_resolved(out_dir)?;
    report.write_json(&out_dir.join("report.json"))?;
    let csv_path = out_dir.join("report.csv");
    let label = format!("{:?}", split).to_lowercase();
    fs::write(
        &csv_path,
        format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row(&label)),
    )
    .with_context(|| format!("writing {}", csv_path.display()))?;
    println!(
        "{} prec@{n} = {:.4}  recall@{n} = {:.4}  ndcg@{n} = {:.4}",
        label,
        report.mean_precision,
        report.mean_recall,
        report.mean_ndcg,
        n = config.train.topn
    );
    Ok(report)
}

/// Average final-iteration aspect weights per (layer, relation) over every
/// evaluation target, written as CSV with the major aspect per row.
pub fn cmd_inspect_aspects<F: Real>(
    snapshot: &ModelSnapshot,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<String> {
    let prep = prepare(config)?;
    let model: DisenHan<F> = restore(snapshot, config, &prep)?;
    let lists = build_eval_lists(
        &prep.index,
        Split::Test,
        config.train.eval_negatives,
        mix(config.seed, 0xEA72),
    )?;
    let mut stats = AspectStats::new(
        &model.config().layers,
        prep.dataset.graph.num_relations(),
    );
    evaluate_model(
        &model,
        &prep.dataset.graph,
        prep.dataset.user_type,
        prep.dataset.item_type,
        &lists,
        config.train.topn,
        &config.train.fanout_plan(),
        mix(config.seed, 0xE7A2),
        Some(&mut stats),
    )?;

    let max_aspects =
        model.config().layers.iter().map(|l| l.aspects).max().unwrap_or(1);
    let mut csv = String::from("layer,relation,major_aspect");
    for k in 0..max_aspects {
        csv.push_str(&format!(",r{k}"));
    }
    csv.push('\n');
    for layer in 0..stats.layers() {
        for rel in 0..prep.dataset.graph.num_relations() {
            let Some(mean) = stats.mean(layer, RelId(rel)) else { continue };
            let major = mean
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite weights"))
                .map(|(k, _)| k)
                .expect("at least one aspect");
            csv.push_str(&format!(
                "{},{},{}",
                layer + 1,
                prep.dataset.graph.relation_label(RelId(rel)).replace(',', ";"),
                major
            ));
            for k in 0..max_aspects {
                match mean.get(k) {
                    Some(v) => csv.push_str(&format!(",{v}")),
                    None => csv.push(','),
                }
            }
            csv.push('\n');
        }
    }
    config.write_resolved(out_dir)?;
    let path = out_dir.join("aspects.csv");
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    println!("{csv}");
    Ok(csv)
}

/// Embed the listed nodes ("type:index" entries) and write one CSV row per
/// node: id, type, then the concatenated per-aspect unit vectors.
pub fn cmd_export_embeddings<F: Real>(
    snapshot: &ModelSnapshot,
    config: &RunConfig,
    nodes: &str,
    out_dir: &Path,
) -> Result<String> {
    let prep = prepare(config)?;
    let model: DisenHan<F> = restore(snapshot, config, &prep)?;
    let graph = &prep.dataset.graph;

    let mut targets = Vec::new();
    for entry in nodes.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (ty_name, index) = entry
            .split_once(':')
            .ok_or_else(|| anyhow!("node {entry:?} is not of the form type:index"))?;
        let ty = graph
            .type_id(ty_name)
            .ok_or_else(|| anyhow!("unknown node type {ty_name:?} in {entry:?}"))?;
        let index: usize =
            index.parse().map_err(|_| anyhow!("bad node index in {entry:?}"))?;
        if index >= graph.node_count(ty) {
            bail!(
                "unknown node {entry:?}: type {ty_name} has {} nodes",
                graph.node_count(ty)
            );
        }
        targets.push(NodeId::new(ty, index));
    }
    if targets.is_empty() {
        bail!("no nodes to export");
    }

    let fanouts: Fanouts = config.train.fanout_plan();
    let embeddings = embed_nodes(
        &model,
        graph,
        &targets,
        &fanouts,
        mix(config.seed, 0xE7A2),
        None,
    )?;

    let width = model.config().layers[0].out_dim;
    let mut csv = String::from("id,type");
    for d in 0..width {
        csv.push_str(&format!(",v{d}"));
    }
    csv.push('\n');
    for node in &targets {
        let emb = &embeddings[node];
        csv.push_str(&format!("{},{}", node.index, graph.type_name(node.ty)));
        for v in emb.concat() {
            csv.push_str(&format!(",{}", v.as_f64()));
        }
        csv.push('\n');
    }
    config.write_resolved(out_dir)?;
    let path = out_dir.join("embeddings.csv");
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} embeddings to {}", targets.len(), path.display());
    Ok(csv)
}

/// Sweep specification like "K=1,2,5;I=1,3,5;L=1,2": the cross product of
/// aspect counts, iteration counts and layer counts.
pub fn parse_sweep(spec: &str) -> Result<Vec<(Option<usize>, Option<usize>, Option<usize>)>> {
    let mut ks: Vec<Option<usize>> = vec![None];
    let mut is: Vec<Option<usize>> = vec![None];
    let mut ls: Vec<Option<usize>> = vec![None];
    for axis in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, values) = axis
            .split_once('=')
            .ok_or_else(|| anyhow!("sweep axis {axis:?} is not NAME=v1,v2"))?;
        let parsed: Vec<Option<usize>> = values
            .split(',')
            .map(|v| v.trim().parse::<usize>().map(Some))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| anyhow!("bad sweep values in {axis:?}: {e}"))?;
        match name.trim() {
            "K" | "k" => ks = parsed,
            "I" | "i" => is = parsed,
            "L" | "l" => ls = parsed,
            other => bail!("unknown sweep axis {other:?} (expected K, I or L)"),
        }
    }
    let mut combos = Vec::new();
    for &k in &ks {
        for &i in &is {
            for &l in &ls {
                combos.push((k, i, l));
            }
        }
    }
    Ok(combos)
}

/// Run train + evaluate across a sweep, one subdirectory per combination,
/// appending to a single CSV.
pub fn cmd_sweep<F: Real>(config: &RunConfig, spec: &str, out_dir: &Path) -> Result<()> {
    let combos = parse_sweep(spec)?;
    let csv_path = out_dir.join("sweep.csv");
    let mut rows = format!("{},label_k,label_i,label_l\n", MetricReport::csv_header());
    for (k, i, l) in combos {
        let mut combo_config = config.clone();
        if let Some(l) = l {
            let template =
                combo_config.model.layers.last().cloned().expect("validated config");
            combo_config.model.layers.resize(l, template);
            let f = combo_config.train.fanouts.first().copied().unwrap_or(10);
            combo_config.train.fanouts = vec![f; l];
        }
        if let Some(k) = k {
            for layer in combo_config.model.layers.iter_mut() {
                layer.aspects = k;
            }
        }
        if let Some(i) = i {
            for layer in combo_config.model.layers.iter_mut() {
                layer.iters = i;
            }
        }
        combo_config.model.validate()?;
        let label = format!(
            "K{}_I{}_L{}",
            k.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            i.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            l.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
        );
        let sub = out_dir.join(&label);
        fs::create_dir_all(&sub)?;
        println!("=== sweep {label} ===");
        let artifacts = cmd_train::<F>(&combo_config, &sub)?;
        println!(
            "{label}: best validation recall {:.4} at epoch {}",
            artifacts.result.best_recall, artifacts.result.best_epoch
        );
        let report = cmd_evaluate::<F>(&artifacts.snapshot, &combo_config, Split::Test, &sub)?;
        rows.push_str(&format!(
            "{},{},{},{}\n",
            report.csv_row(&label),
            k.map(|v| v.to_string()).unwrap_or_default(),
            i.map(|v| v.to_string()).unwrap_or_default(),
            l.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    fs::write(&csv_path, rows).with_context(|| format!("writing {}", csv_path.display()))?;
    println!("sweep results in {}", csv_path.display());
    Ok(())
}
