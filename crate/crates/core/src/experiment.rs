//! Task construction, the evaluation protocol, per-seed runs with metrics,
//! checkpoints and state logs, summaries, and embedding export.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TaskSpec};
use crate::curriculum::{default_arch, run_variant_with, StepLog, Variant, VariantConfig};
use crate::data::{generate_synthetic_task, load_image_folder, stack_features, DomainDataset, ImageFolderOptions, MtdaTask, Sample};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelBundle};
use crate::objectives::LossValues;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain_id: usize,
    pub name: String,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_target: Vec<DomainAccuracy>,
    /// Arithmetic mean of the per-target accuracies.
    pub average: f64,
}

/// MLP-head accuracy on a labeled split, eval mode.
pub fn accuracy(bundle: &ModelBundle, split: &DomainDataset) -> Result<f64> {
    if split.samples.is_empty() {
        return Err(Error::Dataset(format!("evaluation split '{}' is empty", split.name)));
    }
    let mut correct = 0usize;
    for chunk in split.samples.chunks(256) {
        let p = bundle.predict_proba(&stack_features(chunk))?;
        for (row, s) in p.rows().into_iter().zip(chunk) {
            let label = s.label.ok_or_else(|| {
                Error::Dataset(format!("evaluation sample {} is unlabeled", s.uid))
            })?;
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / split.samples.len() as f64)
}

/// Per-target held-out accuracy of the MLP head and their mean.
pub fn evaluate(bundle: &ModelBundle, task: &MtdaTask) -> Result<Metrics> {
    if task.target_eval.is_empty() || task.target_eval.len() != task.targets.len() {
        return Err(Error::Dataset("task has no held-out target evaluation splits".into()));
    }
    let per_target = task
        .target_eval
        .iter()
        .map(|split| {
            Ok(DomainAccuracy {
                domain_id: split.domain_id,
                name: split.name.clone(),
                accuracy: accuracy(bundle, split)?,
                samples: split.samples.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let average = per_target.iter().map(|d| d.accuracy).sum::<f64>() / per_target.len() as f64;
    Ok(Metrics {
        per_target,
        average,
    })
}

fn split_folder(
    data: &DomainDataset,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ data.domain_id as u64));
    let n_eval = ((data.samples.len() as f64) * fraction).round() as usize;
    let n_eval = n_eval.clamp(1, data.samples.len().saturating_sub(1).max(1));
    if data.samples.len() < 2 {
        return Err(Error::Dataset(format!("domain '{}' is too small to split", data.name)));
    }
    let mut eval: Vec<usize> = order[..n_eval].to_vec();
    let mut train: Vec<usize> = order[n_eval..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    Ok((
        train.into_iter().map(|i| data.samples[i].clone()).collect(),
        eval.into_iter().map(|i| data.samples[i].clone()).collect(),
    ))
}

/// Materializes the task for one run seed.
pub fn build_task(spec: &TaskSpec, seed: u64) -> Result<MtdaTask> {
    match spec {
        TaskSpec::Synthetic { spec, fixed_seed } => {
            let mut spec = spec.clone();
            if !fixed_seed {
                spec.seed = seed;
            }
            generate_synthetic_task(&spec)
        }
        TaskSpec::Folders {
            root,
            source,
            targets,
            eval_fraction,
            image_size,
            split_seed,
        } => {
            let opts = ImageFolderOptions {
                resize: Some((*image_size, *image_size)),
            };
            let src = load_image_folder(&root.join(source), 0, &opts)?;
            if !src.dataset.is_fully_labeled() {
                return Err(Error::Dataset(format!("source '{source}' must be a labeled folder")));
            }
            let n_classes = src.class_names.len();
            let mut tgt = Vec::new();
            let mut tgt_eval = Vec::new();
            let mut hidden = BTreeMap::new();
            for (j, name) in targets.iter().enumerate() {
                let id = j + 1;
                let folder = load_image_folder(&root.join(name), id, &opts)?;
                if folder.class_names != src.class_names {
                    return Err(Error::Dataset(format!(
                        "target '{name}' classes {:?} differ from the source classes {:?}",
                        folder.class_names, src.class_names
                    )));
                }
                let (train, eval) = split_folder(&folder.dataset, *eval_fraction, *split_seed)?;
                for s in &train {
                    hidden.insert(s.uid, s.label.expect("labeled folder"));
                }
                let train: Vec<Sample> = train.iter().map(Sample::unlabeled).collect();
                tgt.push(DomainDataset::new(name.clone(), id, train)?);
                tgt_eval.push(DomainDataset::new(name.clone(), id, eval)?);
            }
            let task = MtdaTask {
                source: src.dataset,
                targets: tgt,
                n_classes,
                input: src.shape,
                source_eval: None,
                target_eval: tgt_eval,
                hidden_target_labels: hidden,
            };
            task.validate()?;
            Ok(task)
        }
    }
}

/// Variant configuration for one run seed.
pub fn variant_config(config: &ExperimentConfig, variant: Variant, task: &MtdaTask, seed: u64) -> VariantConfig {
    let arch = config.model.apply(default_arch(task.input, task.n_classes));
    VariantConfig {
        variant,
        train: config.train.clone(),
        weights: config.weights,
        arch: Some(arch),
        seed,
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub per_target: Vec<DomainAccuracy>,
    pub selection_history: Vec<usize>,
    pub pseudo_label_counts: Vec<usize>,
    pub step_losses: Vec<LossValues>,
    pub pretrain_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub domain_id: usize,
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// One line of `summary.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    pub per_target: Vec<TargetSummary>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn summarize(variant: &str, records: &[MetricsRecord]) -> SummaryRow {
    let acc: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let (mean, std) = mean_std(&acc);
    let per_target = records
        .first()
        .map(|first| {
            first
                .per_target
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let v: Vec<f64> = records.iter().map(|r| r.per_target[i].accuracy).collect();
                    let (mean, std) = mean_std(&v);
                    TargetSummary {
                        domain_id: d.domain_id,
                        name: d.name.clone(),
                        mean,
                        std,
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    SummaryRow {
        variant: variant.to_string(),
        seeds: records.iter().map(|r| r.seed).collect(),
        mean,
        std,
        per_target,
    }
}

/// Human-readable table of summary rows.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let names: Vec<String> = rows
        .first()
        .map(|r| r.per_target.iter().map(|t| t.name.clone()).collect())
        .unwrap_or_default();
    out.push_str(&format!("{:<12}", "variant"));
    for n in &names {
        out.push_str(&format!(" {:>15}", n));
    }
    out.push_str(&format!(" {:>15}\n", "average"));
    for r in rows {
        out.push_str(&format!("{:<12}", r.variant));
        for t in &r.per_target {
            out.push_str(&format!(" {:>15}", format!("{:.2} ± {:.2}", 100.0 * t.mean, 100.0 * t.std)));
        }
        out.push_str(&format!(
            " {:>15}\n",
            format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std)
        ));
    }
    out
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn append_jsonl<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(row)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

/// Result of one seed of one variant.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub record: MetricsRecord,
    pub steps: Vec<StepLog>,
    pub bundle: ModelBundle,
}

/// Trains and evaluates one variant for one seed, writing checkpoints and
/// the state log under `seed_dir` when given.
pub fn run_seed(
    config: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    seed_dir: Option<&Path>,
) -> Result<SeedRun> {
    let task = build_task(&config.task, seed)?;
    let vc = variant_config(config, variant, &task, seed);
    if let Some(dir) = seed_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut hook = |q: usize, bundle: &ModelBundle, rng: &ChaCha8Rng| -> Result<()> {
        if let Some(dir) = seed_dir {
            Checkpoint::new(bundle.clone(), Some(rng)).save(&dir.join(format!("step_{q}.ckpt")))?;
        }
        Ok(())
    };
    let out = run_variant_with(&task, &vc, &mut hook)?;
    let metrics = evaluate(&out.bundle, &task)?;
    if let Some(dir) = seed_dir {
        Checkpoint::new(out.bundle.clone(), Some(&out.rng)).save(&dir.join("final.ckpt"))?;
        write_jsonl(&dir.join("state.jsonl"), &out.steps)?;
    }
    let record = MetricsRecord {
        variant: variant.name().to_string(),
        seed,
        accuracy: metrics.average,
        per_target: metrics.per_target,
        selection_history: out.state.selection_history.clone(),
        pseudo_label_counts: out.steps.iter().map(|s| s.pseudo_label_count).collect(),
        step_losses: out.steps.iter().map(|s| s.mean_losses).collect(),
        pretrain_iterations: out.pretrain.iterations,
    };
    Ok(SeedRun {
        record,
        steps: out.steps,
        bundle: out.bundle,
    })
}

/// Runs every configured variant over every seed. Per variant writes
/// `metrics.jsonl` (one record per seed), `summary.txt` and
/// `summary.jsonl`; the output root gets the combined summary.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<SummaryRow>> {
    // Fail on task problems before any training starts.
    build_task(&config.task, config.seeds[0])?;
    let root = &config.output_dir;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rows = Vec::new();
    for &variant in &config.variants {
        let vdir = root.join(variant.name());
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        let metrics_path = vdir.join("metrics.jsonl");
        File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut records = Vec::new();
        for &seed in &config.seeds {
            let run = run_seed(config, variant, seed, Some(&vdir.join(seed.to_string())))?;
            info!("{variant} seed {seed}: average accuracy {:.4}", run.record.accuracy);
            append_jsonl(&metrics_path, &run.record)?;
            records.push(run.record);
        }
        let row = summarize(variant.name(), &records);
        write_jsonl(&vdir.join("summary.jsonl"), std::slice::from_ref(&row))?;
        let txt = vdir.join("summary.txt");
        fs::write(&txt, format_summary(std::slice::from_ref(&row))).map_err(|e| Error::io(&txt, e))?;
        rows.push(row);
    }
    write_jsonl(&root.join("summary.jsonl"), &rows)?;
    let txt = root.join("summary.txt");
    fs::write(&txt, format_summary(&rows)).map_err(|e| Error::io(&txt, e))?;
    Ok(rows)
}

/// Every `*.cfg` file in `dir`, sorted.
pub fn sweep_configs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "cfg") {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Config(format!("no .cfg files in {}", dir.display())));
    }
    Ok(out)
}

/// Writes `uid,domain_id,label,f0..f{d-1}` for every evaluation sample
/// (source split first when present, then targets).
pub fn export_embeddings(bundle: &ModelBundle, task: &MtdaTask, path: &Path) -> Result<usize> {
    let splits: Vec<&DomainDataset> = task.source_eval.iter().chain(&task.target_eval).collect();
    if splits.is_empty() {
        return Err(Error::Dataset("task has no evaluation splits to export".into()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let d = bundle.arch.feature_dim;
    let mut header = vec!["uid".to_string(), "domain_id".into(), "label".into()];
    header.extend((0..d).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let mut rows = 0;
    for split in splits {
        for chunk in split.samples.chunks(256) {
            let (f, _) = bundle.classifier_forward(&stack_features(chunk), &mut crate::nn::Mode::Eval)?;
            for (s, row) in chunk.iter().zip(f.rows()) {
                let mut rec = vec![
                    s.uid.to_string(),
                    s.domain_id.to_string(),
                    s.label.map(|l| l.to_string()).unwrap_or_default(),
                ];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(|e| csv_err(path, e))?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}
