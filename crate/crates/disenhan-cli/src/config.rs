//! Run configuration: a JSON file unioning model and training settings,
//! with command-line overrides. Every command writes the fully resolved
//! config next to its outputs so a run is reconstructible from its
//! directory alone.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use disenhan::model::{LayerSpec, ModelConfig};
use disenhan::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    /// Dataset manifest path, resolved relative to the config file.
    pub manifest: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default = "default_fractions")]
    pub split_fractions: (f64, f64, f64),
}

fn default_fractions() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Random seed for the whole run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Aspect count per layer, e.g. "5,5".
    #[arg(long)]
    pub aspects: Option<String>,
    /// Routing iterations per layer.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Propagation layer count.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Fan-out applied at every depth.
    #[arg(long)]
    pub fanout: Option<usize>,
    /// Negatives per positive during training.
    #[arg(long)]
    pub neg_ratio: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Ranking cutoff N.
    #[arg(long)]
    pub topn: Option<usize>,
    #[arg(long)]
    pub precision: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("config not found: {}", path.display()))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if config.manifest.is_relative() {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            config.manifest = base.join(&config.manifest);
        }
        config.apply(overrides)?;
        config.train.seed = config.seed;
        config.model.validate().map_err(anyhow::Error::from)?;
        Ok(config)
    }

    fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(layers) = o.layers {
            if layers == 0 {
                bail!("--layers must be positive");
            }
            // Grow or shrink the stack, repeating the last layer spec.
            let template = self.model.layers.last().cloned().unwrap_or(LayerSpec {
                aspects: 5,
                out_dim: 100,
                iters: 5,
            });
            self.model.layers.resize(layers, template);
        }
        if let Some(aspects) = &o.aspects {
            let counts: Vec<usize> = aspects
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| anyhow::anyhow!("bad --aspects list: {e}"))?;
            if counts.is_empty() {
                bail!("--aspects needs at least one count");
            }
            for (i, layer) in self.model.layers.iter_mut().enumerate() {
                layer.aspects = *counts.get(i).unwrap_or(counts.last().expect("non-empty"));
            }
        }
        if let Some(iters) = o.iters {
            for layer in self.model.layers.iter_mut() {
                layer.iters = iters;
            }
        }
        if let Some(fanout) = o.fanout {
            self.train.fanouts = vec![fanout; self.model.layers.len()];
        } else if self.train.fanouts.len() != self.model.layers.len() {
            // Keep the plan aligned when --layers changed the depth.
            let f = self.train.fanouts.first().copied().unwrap_or(10);
            self.train.fanouts = vec![f; self.model.layers.len()];
        }
        if let Some(r) = o.neg_ratio {
            self.train.negative_ratio = r;
        }
        if let Some(d) = o.dropout {
            self.model.dropout = d;
        }
        if let Some(lr) = o.lr {
            self.train.learning_rate = lr;
        }
        if let Some(p) = o.patience {
            self.train.patience = p;
        }
        if let Some(e) = o.epochs {
            self.train.max_epochs = e;
        }
        if let Some(n) = o.topn {
            self.train.topn = n;
        }
        if let Some(p) = &o.precision {
            self.precision = match p.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => bail!("unknown precision {other:?} (use f32 or f64)"),
            };
        }
        Ok(())
    }

    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("resolved_config.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Output directory: explicit flag, or `$DISENHAN_OUT/<command>`.
pub fn resolve_out_dir(out: &Option<PathBuf>, command: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(d) => d.clone(),
        None => match std::env::var_os("DISENHAN_OUT") {
            Some(root) => PathBuf::from(root).join(command),
            None => bail!("--out not given and DISENHAN_OUT is unset"),
        },
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}
