//! Line-oriented `key = value` experiment configuration with dotted
//! namespaces. `#` starts a comment; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curriculum::{Direction, GcnContext, TrainConfig, Variant};
use crate::data::{SyntheticSpec, TargetSampling};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, BackboneKind, GrlSchedule};
use crate::objectives::LossWeights;

/// Where the task comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Generated data. When `fixed_seed` is false the generator seed follows
    /// the run seed.
    Synthetic { spec: SyntheticSpec, fixed_seed: bool },
    /// `<root>/<domain>/<class>/<file>` image folders. Targets must be
    /// labeled so that a held-out evaluation split can be carved out.
    Folders {
        root: PathBuf,
        source: String,
        targets: Vec<String>,
        eval_fraction: f64,
        image_size: u32,
        split_seed: u64,
    },
}

/// Optional architecture overrides applied on top of the task default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelOverrides {
    pub backbone: Option<BackboneKind>,
    pub backbone_hidden: Option<usize>,
    pub backbone_dropout: Option<f64>,
    pub feature_dim: Option<usize>,
    pub edge_hidden: Option<usize>,
    pub node_hidden: Option<usize>,
    pub disc_hidden: Option<usize>,
    pub disc_dropout: Option<f64>,
}

impl ModelOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, mut arch: ArchConfig) -> ArchConfig {
        if let Some(v) = self.backbone {
            arch.backbone = v;
        }
        if let Some(v) = self.backbone_hidden {
            arch.backbone_hidden = v;
        }
        if let Some(v) = self.backbone_dropout {
            arch.backbone_dropout = v;
        }
        if let Some(v) = self.feature_dim {
            arch.feature_dim = v;
        }
        if let Some(v) = self.edge_hidden {
            arch.edge_hidden = v;
        }
        if let Some(v) = self.node_hidden {
            arch.node_hidden = v;
        }
        if let Some(v) = self.disc_hidden {
            arch.disc_hidden = v;
        }
        if let Some(v) = self.disc_dropout {
            arch.disc_dropout = v;
        }
        arch
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub model: ModelOverrides,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_enum<T>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T>
where
    T: Copy,
{
    let norm = v.trim().to_ascii_lowercase().replace('-', "_");
    options
        .iter()
        .find(|(name, _)| *name == norm)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("{key}: '{v}' is not one of {names:?}"))
        })
}

/// Splits text into `key -> (line, value)` pairs.
fn tokenize(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1))
        })?;
        let k = k.trim().to_string();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.clone(), (n + 1, v.trim().to_string())).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = tokenize(text)?;
        let mut take = |k: &str| kv.remove(k).map(|(_, v)| v);

        let kind = take("task.kind").unwrap_or_else(|| "synthetic".into());
        let task = match kind.as_str() {
            "synthetic" => {
                let mut spec = SyntheticSpec::default();
                if let Some(v) = take("task.n_classes") {
                    spec.n_classes = parse_num("task.n_classes", &v)?;
                }
                if let Some(v) = take("task.dim") {
                    spec.dim = parse_num("task.dim", &v)?;
                }
                if let Some(v) = take("task.samples_per_class") {
                    spec.samples_per_class_per_domain = parse_num("task.samples_per_class", &v)?;
                }
                if let Some(v) = take("task.eval_samples_per_class") {
                    spec.eval_samples_per_class = parse_num("task.eval_samples_per_class", &v)?;
                }
                if let Some(v) = take("task.shift_magnitudes") {
                    spec.shift_magnitudes = parse_list("task.shift_magnitudes", &v)?;
                }
                if let Some(v) = take("task.noise_scale") {
                    spec.noise_scale = parse_num("task.noise_scale", &v)?;
                }
                if let Some(v) = take("task.class_separation") {
                    spec.class_separation = parse_num("task.class_separation", &v)?;
                }
                if let Some(v) = take("task.rotation_per_unit") {
                    spec.rotation_per_unit = parse_num("task.rotation_per_unit", &v)?;
                }
                if let Some(v) = take("task.translation_per_unit") {
                    spec.translation_per_unit = parse_num("task.translation_per_unit", &v)?;
                }
                let fixed_seed = match take("task.seed") {
                    Some(v) => {
                        spec.seed = parse_num("task.seed", &v)?;
                        true
                    }
                    None => false,
                };
                spec.validate()?;
                TaskSpec::Synthetic { spec, fixed_seed }
            }
            "folders" => {
                let root = take("task.root")
                    .ok_or_else(|| Error::Config("task.root is required for folder tasks".into()))?;
                let source = take("task.source")
                    .ok_or_else(|| Error::Config("task.source is required for folder tasks".into()))?;
                let targets: Vec<String> = take("task.targets")
                    .ok_or_else(|| Error::Config("task.targets is required for folder tasks".into()))?
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                if targets.is_empty() {
                    return Err(Error::Config("task.targets lists no domains".into()));
                }
                let eval_fraction = match take("task.eval_fraction") {
                    Some(v) => parse_num("task.eval_fraction", &v)?,
                    None => 0.2,
                };
                if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
                    return Err(Error::Config("task.eval_fraction must be in (0, 1)".into()));
                }
                let image_size = match take("task.image_size") {
                    Some(v) => parse_num("task.image_size", &v)?,
                    None => 28,
                };
                let split_seed = match take("task.split_seed") {
                    Some(v) => parse_num("task.split_seed", &v)?,
                    None => 0,
                };
                TaskSpec::Folders {
                    root: PathBuf::from(root),
                    source,
                    targets,
                    eval_fraction,
                    image_size,
                    split_seed,
                }
            }
            other => return Err(Error::Config(format!("task.kind: unknown kind '{other}'"))),
        };

        let variants = match take("variant.name") {
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(Variant::from_str)
                .collect::<Result<Vec<_>>>()?,
            None => vec![Variant::Dcgct],
        };
        if variants.is_empty() {
            return Err(Error::Config("variant.name lists no variant".into()));
        }

        let mut train = TrainConfig::default();
        macro_rules! num {
            ($key:literal, $field:expr) => {
                if let Some(v) = take($key) {
                    $field = parse_num($key, &v)?;
                }
            };
        }
        num!("train.batch_size", train.batch_size);
        num!("train.k", train.k);
        num!("train.k_finetune", train.k_finetune);
        if let Some(v) = take("train.q") {
            train.q = Some(parse_num("train.q", &v)?);
        }
        num!("train.lr", train.sgd.lr);
        num!("train.momentum", train.sgd.momentum);
        num!("train.weight_decay", train.sgd.weight_decay);
        num!("train.lr_decay", train.sgd.lr_decay);
        num!("train.grl_weight", train.grl_weight);
        if let Some(v) = take("train.grl_schedule") {
            train.grl_schedule = parse_enum(
                "train.grl_schedule",
                &v,
                &[("ramp", GrlSchedule::Ramp), ("constant", GrlSchedule::Constant)],
            )?;
        }
        num!("train.pretrain_patience", train.pretrain_patience);
        num!("train.pretrain_max_iterations", train.pretrain_max_iterations);
        num!("train.pretrain_min_improvement", train.pretrain_min_improvement);
        num!("train.pretrain_holdout", train.pretrain_holdout);
        if let Some(v) = take("train.target_sampling") {
            train.target_sampling = parse_enum(
                "train.target_sampling",
                &v,
                &[
                    ("combined", TargetSampling::Combined),
                    ("stratified", TargetSampling::Stratified),
                ],
            )?;
        }
        if let Some(v) = take("train.gcn_context") {
            train.gcn_context = parse_enum(
                "train.gcn_context",
                &v,
                &[
                    ("source_anchors", GcnContext::SourceAnchors),
                    ("pure_target", GcnContext::PureTarget),
                ],
            )?;
        }
        if let Some(v) = take("train.direction") {
            train.direction = Some(parse_enum(
                "train.direction",
                &v,
                &[
                    ("easiest_first", Direction::EasiestFirst),
                    ("hardest_first", Direction::HardestFirst),
                ],
            )?);
        }
        train.validate()?;

        let mut weights = LossWeights::default();
        num!("loss.lambda_edge", weights.lambda_edge);
        num!("loss.lambda_node", weights.lambda_node);
        num!("loss.lambda_adv", weights.lambda_adv);
        num!("loss.tau", weights.tau);
        weights.validate()?;

        let mut model = ModelOverrides::default();
        if let Some(v) = take("model.backbone") {
            model.backbone = Some(parse_enum(
                "model.backbone",
                &v,
                &[("mlp", BackboneKind::Mlp), ("small_conv", BackboneKind::SmallConv)],
            )?);
        }
        macro_rules! opt {
            ($key:literal, $field:expr) => {
                if let Some(v) = take($key) {
                    $field = Some(parse_num($key, &v)?);
                }
            };
        }
        opt!("model.backbone_hidden", model.backbone_hidden);
        opt!("model.backbone_dropout", model.backbone_dropout);
        opt!("model.feature_dim", model.feature_dim);
        opt!("model.edge_hidden", model.edge_hidden);
        opt!("model.node_hidden", model.node_hidden);
        opt!("model.disc_hidden", model.disc_hidden);
        opt!("model.disc_dropout", model.disc_dropout);

        let output_dir = PathBuf::from(take("output.dir").unwrap_or_else(|| "runs".into()));
        let seeds = match take("seeds") {
            Some(v) => parse_list("seeds", &v)?,
            None => vec![0],
        };
        if seeds.is_empty() {
            return Err(Error::Config("seeds lists no seed".into()));
        }

        if let Some((k, (line, _))) = kv.into_iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key '{k}'")));
        }
        Ok(Self {
            task,
            variants,
            train,
            weights,
            model,
            output_dir,
            seeds,
        })
    }
}
