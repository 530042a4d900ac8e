//! Episodic training: source pre-training, adaptation stages, pseudo-label
//! harvesting, pseudo-source set updates, entropy-based domain selection,
//! fine-tuning, and the ablation variants built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Matrix, Tape};
use crate::data::{stack_features, DomainDataset, InputShape, MiniBatchSampler, MtdaTask, Sample, TargetSampling};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, GrlCoefficient, GrlSchedule, ModelBundle, ParamGroup};
use crate::nn::Mode;
use crate::objectives::{batch_objective, ce_loss, predicted, EdgeTargetSource, LossValues, LossWeights, ObjectiveSpec};
use crate::optim::{Sgd, SgdConfig};

/// Rows per forward pass when scoring a whole pool with the MLP head.
const SCORING_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub uid: u64,
    pub domain_id: usize,
    pub assigned_label: usize,
    pub confidence: f64,
    /// Curriculum step at which the label was harvested.
    pub step: usize,
}

/// Classifier used to harvest pseudo-labels after an adaptation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarvestHead {
    Gcn,
    Mlp,
}

/// Graph context for GCN-head inference over a pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcnContext {
    /// `B` pool samples plus `B` random labeled source anchors per batch.
    #[default]
    SourceAnchors,
    /// `2B` pool samples per batch.
    PureTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetUpdateMode {
    /// Rebuild from the original source each step; all targets stay active.
    Cgct,
    /// Accumulate pseudo-labels and consume one target domain per step.
    Dcl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    EasiestFirst,
    HardestFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SourceOnly,
    /// Conditional adversarial alignment against the combined target pool.
    Cdan,
    /// Adversarial alignment with the domain curriculum and MLP pseudo-labels.
    CdanDcl,
    Cgct,
    Dcgct,
    M1,
    M2,
    M3,
    /// [`Variant::CdanDcl`] with the hardest domain first.
    RevDcl,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::SourceOnly,
        Variant::Cdan,
        Variant::CdanDcl,
        Variant::Cgct,
        Variant::Dcgct,
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::RevDcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::Cdan => "cdan",
            Variant::CdanDcl => "cdan_dcl",
            Variant::Cgct => "cgct",
            Variant::Dcgct => "dcgct",
            Variant::M1 => "m1",
            Variant::M2 => "m2",
            Variant::M3 => "m3",
            Variant::RevDcl => "rev_dcl",
        }
    }

    pub fn profile(self) -> VariantProfile {
        let dcl = |harvest, graph, edge_targets, direction| VariantProfile {
            adapt: true,
            graph,
            harvest: Some(harvest),
            edge_targets,
            set_update: SetUpdateMode::Dcl,
            direction,
            finetune: true,
        };
        use Direction::*;
        use EdgeTargetSource as E;
        match self {
            Variant::SourceOnly => VariantProfile {
                adapt: false,
                graph: false,
                harvest: None,
                edge_targets: E::Mlp,
                set_update: SetUpdateMode::Cgct,
                direction: EasiestFirst,
                finetune: false,
            },
            Variant::Cdan => VariantProfile {
                adapt: true,
                graph: false,
                harvest: None,
                edge_targets: E::Mlp,
                set_update: SetUpdateMode::Cgct,
                direction: EasiestFirst,
                finetune: false,
            },
            Variant::Cgct => VariantProfile {
                adapt: true,
                graph: true,
                harvest: Some(HarvestHead::Gcn),
                edge_targets: E::Mlp,
                set_update: SetUpdateMode::Cgct,
                direction: EasiestFirst,
                finetune: true,
            },
            Variant::CdanDcl => dcl(HarvestHead::Mlp, false, E::Mlp, EasiestFirst),
            Variant::RevDcl => dcl(HarvestHead::Mlp, false, E::Mlp, HardestFirst),
            Variant::Dcgct => dcl(HarvestHead::Gcn, true, E::Mlp, EasiestFirst),
            Variant::M1 => dcl(HarvestHead::Mlp, true, E::Mlp, EasiestFirst),
            Variant::M2 => dcl(HarvestHead::Gcn, true, E::Gcn, EasiestFirst),
            Variant::M3 => dcl(HarvestHead::Mlp, true, E::Gcn, EasiestFirst),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let v = match key.as_str() {
            "source_only" | "source" => Variant::SourceOnly,
            "cdan" | "cdan_baseline" | "baseline" => Variant::Cdan,
            "cdan_dcl" | "dcl" => Variant::CdanDcl,
            "cgct" => Variant::Cgct,
            "dcgct" | "d_cgct" => Variant::Dcgct,
            "m1" => Variant::M1,
            "m2" => Variant::M2,
            "m3" => Variant::M3,
            "rev_dcl" | "cdan_rev_dcl" => Variant::RevDcl,
            _ => return Err(Error::Config(format!("unknown variant '{s}'"))),
        };
        Ok(v)
    }
}

/// Which pieces of the training procedure a variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantProfile {
    pub adapt: bool,
    pub graph: bool,
    pub harvest: Option<HarvestHead>,
    pub edge_targets: EdgeTargetSource,
    pub set_update: SetUpdateMode,
    pub direction: Direction,
    pub finetune: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Adaptation iterations per curriculum step.
    pub k: usize,
    /// Fine-tuning iterations.
    pub k_finetune: usize,
    /// Curriculum steps; the number of targets when unset.
    pub q: Option<usize>,
    pub sgd: SgdConfig,
    pub grl_weight: f64,
    pub grl_schedule: GrlSchedule,
    pub pretrain_patience: usize,
    pub pretrain_max_iterations: usize,
    pub pretrain_min_improvement: f64,
    pub pretrain_holdout: f64,
    pub target_sampling: TargetSampling,
    pub gcn_context: GcnContext,
    /// Overrides the variant's curriculum direction.
    pub direction: Option<Direction>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            k: 300,
            k_finetune: 200,
            q: None,
            sgd: SgdConfig::default(),
            grl_weight: 1.0,
            grl_schedule: GrlSchedule::Ramp,
            pretrain_patience: 50,
            pretrain_max_iterations: 2000,
            pretrain_min_improvement: 0.01,
            pretrain_holdout: 0.1,
            target_sampling: TargetSampling::Combined,
            gcn_context: GcnContext::SourceAnchors,
            direction: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        self.sgd.validate()?;
        if !(self.grl_weight.is_finite() && self.grl_weight >= 0.0) {
            return Err(Error::Config("grl weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.pretrain_holdout) {
            return Err(Error::Config("pretrain holdout must be in [0, 1)".into()));
        }
        if !(self.pretrain_min_improvement.is_finite() && self.pretrain_min_improvement >= 0.0) {
            return Err(Error::Config("pretrain improvement threshold must be non-negative".into()));
        }
        if self.q == Some(0) {
            return Err(Error::Config("q must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    pub train: TrainConfig,
    pub weights: LossWeights,
    /// Architecture; derived from the task input when unset.
    pub arch: Option<ArchConfig>,
    pub seed: u64,
}

impl VariantConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            arch: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.weights.validate()?;
        if let Some(a) = &self.arch {
            a.validate()?;
        }
        Ok(())
    }

    pub fn direction(&self) -> Direction {
        self.train.direction.unwrap_or(self.variant.profile().direction)
    }
}

/// Default architecture for a task's input layout.
pub fn default_arch(input: InputShape, n_classes: usize) -> ArchConfig {
    match input {
        InputShape::Image {
            channels: 3,
            height: 28,
            width: 28,
        } => ArchConfig::for_small_images(n_classes),
        InputShape::Image { .. } => ArchConfig {
            input,
            ..ArchConfig::for_vectors(input.len(), n_classes)
        },
        InputShape::Vector { dim } => ArchConfig::for_vectors(dim, n_classes),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub q: usize,
    pub original_source: Vec<Sample>,
    pub pseudo_source: Vec<Sample>,
    /// Target domains not yet consumed (DCL only shrinks this).
    pub remaining_targets: BTreeSet<usize>,
    /// Pseudo-labels currently in `pseudo_source`.
    pub records: Vec<PseudoLabelRecord>,
    pub selection_history: Vec<usize>,
    /// Iterations run within the current stage.
    pub iteration: usize,
}

impl CurriculumState {
    pub fn new(source: &DomainDataset, target_ids: impl IntoIterator<Item = usize>) -> Self {
        Self {
            q: 0,
            original_source: source.samples.clone(),
            pseudo_source: source.samples.clone(),
            remaining_targets: target_ids.into_iter().collect(),
            records: Vec::new(),
            selection_history: Vec::new(),
            iteration: 0,
        }
    }
}

/// Folds harvested `records` into the pseudo-source set. `pool` must contain
/// every sample a record refers to. In DCL mode `consumed` is removed from
/// the remaining targets. Ground-truth source labels are never overwritten.
pub fn update_source_set(
    state: &CurriculumState,
    records: &[PseudoLabelRecord],
    pool: &[Sample],
    mode: SetUpdateMode,
    consumed: Option<usize>,
) -> Result<CurriculumState> {
    let by_uid: BTreeMap<u64, &Sample> = pool.iter().map(|s| (s.uid, s)).collect();
    let mut next = state.clone();
    let (mut set, mut kept) = match mode {
        SetUpdateMode::Cgct => (state.original_source.clone(), Vec::new()),
        SetUpdateMode::Dcl => (state.pseudo_source.clone(), state.records.clone()),
    };
    let mut present: BTreeSet<u64> = set.iter().map(|s| s.uid).collect();
    for r in records {
        let sample = by_uid.get(&r.uid).ok_or_else(|| {
            Error::Contract(format!("record for uid {} has no sample in the pool", r.uid))
        })?;
        if !present.insert(r.uid) {
            debug!("uid {} already in the pseudo-source set; keeping the existing label", r.uid);
            continue;
        }
        set.push(sample.with_label(r.assigned_label));
        kept.push(*r);
    }
    next.pseudo_source = set;
    next.records = kept;
    if mode == SetUpdateMode::Dcl {
        if let Some(d) = consumed {
            if !next.remaining_targets.remove(&d) {
                return Err(Error::Contract(format!("domain {d} was already consumed")));
            }
        }
    }
    next.q += 1;
    next.iteration = 0;
    Ok(next)
}

/// Mean Shannon entropy of the MLP head's predictions over `domain`.
pub fn domain_entropy(bundle: &ModelBundle, domain: &DomainDataset) -> Result<f64> {
    if domain.samples.is_empty() {
        return Err(Error::Dataset(format!("domain '{}' is empty", domain.name)));
    }
    let mut total = 0.0;
    for chunk in domain.samples.chunks(SCORING_CHUNK) {
        let p = bundle.predict_proba(&stack_features(chunk))?;
        for row in p.rows() {
            total -= row.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
        }
    }
    Ok(total / domain.samples.len() as f64)
}

/// Lowest (easiest first) or highest entropy domain; ties go to the lowest id.
pub fn select_next_domain(entropies: &BTreeMap<usize, f64>, direction: Direction) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&d, &h) in entropies {
        let better = match best {
            None => true,
            Some((_, b)) => match direction {
                Direction::EasiestFirst => h < b,
                Direction::HardestFirst => h > b,
            },
        };
        if better {
            best = Some((d, h));
        }
    }
    best.map(|(d, _)| d)
        .ok_or_else(|| Error::Contract("no target domain left to select".into()))
}

/// Inference settings for harvesting.
#[derive(Debug, Clone, Copy)]
pub struct HarvestOptions<'a> {
    pub tau: f64,
    pub head: HarvestHead,
    pub batch_size: usize,
    pub context: GcnContext,
    /// Labeled samples used as graph anchors.
    pub anchors: &'a [Sample],
    pub step: usize,
}

/// Class probabilities of `pool` from the chosen head, in eval mode.
pub fn pool_probabilities(
    bundle: &ModelBundle,
    pool: &[Sample],
    opts: &HarvestOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Matrix> {
    let nc = bundle.arch.n_classes;
    let mut out = Matrix::zeros((pool.len(), nc));
    match opts.head {
        HarvestHead::Mlp => {
            for (c, chunk) in pool.chunks(SCORING_CHUNK).enumerate() {
                let p = bundle.predict_proba(&stack_features(chunk))?;
                let start = c * SCORING_CHUNK;
                out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&p);
            }
        }
        HarvestHead::Gcn => {
            let b = opts.batch_size.max(1);
            let (chunk_len, anchors) = match opts.context {
                GcnContext::SourceAnchors if !opts.anchors.is_empty() => (b, b),
                GcnContext::SourceAnchors => {
                    warn!("no labeled anchors available; using pure-target graph batches");
                    (2 * b, 0)
                }
                GcnContext::PureTarget => (2 * b, 0),
            };
            for (c, chunk) in pool.chunks(chunk_len).enumerate() {
                let mut nodes: Vec<&Sample> = chunk.iter().collect();
                for _ in 0..anchors {
                    nodes.push(&opts.anchors[rng.random_range(0..opts.anchors.len())]);
                }
                if nodes.len() < 2 {
                    // A lone node has no graph; borrow a neighbour as context.
                    nodes.push(&pool[(c * chunk_len + 1) % pool.len()]);
                }
                let x = stack_features(nodes.iter().copied());
                let (_, logits) = bundle.gcn_classifier_forward(&x, &mut Mode::Eval)?;
                let p = softmax_rows(&logits);
                let start = c * chunk_len;
                out.slice_mut(ndarray::s![start..start + chunk.len(), ..])
                    .assign(&p.slice(ndarray::s![..chunk.len(), ..]));
            }
        }
    }
    Ok(out)
}

/// Records `(uid, argmax)` for every pool sample whose top probability
/// exceeds `tau`. Parameters are not modified.
pub fn pseudo_label_stage(
    bundle: &ModelBundle,
    pool: &[Sample],
    opts: &HarvestOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PseudoLabelRecord>> {
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let probs = pool_probabilities(bundle, pool, opts, rng)?;
    Ok(records_from_probabilities(pool, &probs, opts.tau, opts.step))
}

pub fn records_from_probabilities(
    pool: &[Sample],
    probs: &Matrix,
    tau: f64,
    step: usize,
) -> Vec<PseudoLabelRecord> {
    pool.iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let (label, confidence) = predicted(probs, i);
            (confidence > tau).then_some(PseudoLabelRecord {
                uid: s.uid,
                domain_id: s.domain_id,
                assigned_label: label,
                confidence,
                step,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedMode {
    /// Stops once the held-out loss stalls, capped at `max_iterations`.
    Pretrain,
    /// Runs exactly the requested iterations.
    Finetune,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub iterations: usize,
    pub train_losses: Vec<f64>,
    pub holdout_losses: Vec<f64>,
}

/// Minimizes the MLP-head cross-entropy over the feature extractor and MLP
/// head only. `iterations` is the cap in pretrain mode.
pub fn supervised_phase(
    bundle: &mut ModelBundle,
    pool: &[Sample],
    iterations: usize,
    mode: SupervisedMode,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PhaseReport> {
    if pool.is_empty() {
        return Err(Error::Config("supervised phase over an empty pool".into()));
    }
    if let Some(s) = pool.iter().find(|s| s.label.is_none()) {
        return Err(Error::Contract(format!("sample {} in a supervised pool is unlabeled", s.uid)));
    }
    let mut report = PhaseReport::default();
    if iterations == 0 {
        return Ok(report);
    }

    let (train, holdout): (Vec<Sample>, Vec<Sample>) = match mode {
        SupervisedMode::Finetune => (pool.to_vec(), Vec::new()),
        SupervisedMode::Pretrain => {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(rng);
            let n_hold = ((pool.len() as f64) * config.pretrain_holdout).floor() as usize;
            let n_hold = n_hold.min(pool.len().saturating_sub(1));
            let hold = order[..n_hold].iter().map(|&i| pool[i].clone()).collect();
            let tr = order[n_hold..].iter().map(|&i| pool[i].clone()).collect();
            (tr, hold)
        }
    };
    let holdout_x = (!holdout.is_empty()).then(|| stack_features(&holdout));
    let holdout_y: Vec<usize> = holdout.iter().map(|s| s.label.expect("checked")).collect();

    let groups = [ParamGroup::FeatureExtractor, ParamGroup::MlpHead];
    let mut opt = Sgd::new(config.sgd, bundle);
    let mut sampler = MiniBatchSampler::new(config.batch_size, TargetSampling::Combined)?;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for it in 0..iterations {
        let idx = sampler.next_source_indices(train.len(), rng)?;
        let x = stack_features(idx.iter().map(|&i| &train[i]));
        let y: Vec<usize> = idx.iter().map(|&i| train[i].label.expect("checked")).collect();
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let f = bundle.features_var(&mut tape, &bound, &x, &mut Mode::Train(rng))?;
        let logits = bundle.mlp_logits_var(&mut tape, &bound, f);
        let loss = ce_loss(&mut tape, logits, &y)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                detail: format!("supervised loss {value} on uids {:?}", idx.iter().map(|&i| train[i].uid).collect::<Vec<_>>()),
            });
        }
        let grads = bound.gradients(&tape.backward(loss));
        opt.step(bundle, &grads, &groups);
        report.train_losses.push(value);
        report.iterations = it + 1;

        if let (SupervisedMode::Pretrain, Some(hx)) = (mode, &holdout_x) {
            let (_, logits) = bundle.classifier_forward(hx, &mut Mode::Eval)?;
            let h = crate::objectives::ce_loss_value(&logits, &holdout_y)?;
            report.holdout_losses.push(h);
            if h < best * (1.0 - config.pretrain_min_improvement) {
                best = h;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.pretrain_patience {
                    debug!("pretraining converged after {} iterations (held-out loss {h:.4})", it + 1);
                    break;
                }
            }
        }
    }
    Ok(report)
}

/// Static settings of one adaptation stage.
#[derive(Debug, Clone, Copy)]
pub struct StageSettings {
    pub iterations: usize,
    pub profile: VariantProfile,
    pub weights: LossWeights,
    pub source_domain: usize,
}

/// Runs `iterations` adaptation steps against `target_pool`, returning the
/// per-iteration loss log.
pub fn adaptation_stage(
    bundle: &mut ModelBundle,
    state: &mut CurriculumState,
    target_pool: &[Sample],
    settings: &StageSettings,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LossValues>> {
    let k = settings.iterations;
    let mut log = Vec::with_capacity(k);
    if k == 0 {
        return Ok(log);
    }
    if state.pseudo_source.is_empty() || target_pool.is_empty() {
        return Err(Error::Config("adaptation needs a nonempty source and target pool".into()));
    }
    let groups: Vec<ParamGroup> = if settings.profile.graph {
        ParamGroup::ALL.to_vec()
    } else {
        vec![
            ParamGroup::FeatureExtractor,
            ParamGroup::MlpHead,
            ParamGroup::Discriminator,
        ]
    };
    let mut opt = Sgd::new(config.sgd, bundle);
    let mut sampler = MiniBatchSampler::new(config.batch_size, config.target_sampling)?;
    for it in 0..k {
        state.iteration = it;
        let batch = sampler.next_batch(&state.pseudo_source, target_pool, rng)?;
        let spec = ObjectiveSpec {
            weights: settings.weights,
            grl: GrlCoefficient::new(config.grl_weight, it as f64 / k as f64, config.grl_schedule),
            use_graph: settings.profile.graph,
            use_adversarial: true,
            edge_targets: settings.profile.edge_targets,
            source_domain: settings.source_domain,
        };
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let obj = batch_objective(bundle, &mut tape, &bound, &batch, &spec, &mut Mode::Train(rng))?;
        let grads = bound.gradients(&tape.backward(obj.total));
        if !obj.values.total.is_finite() || !grads.is_finite() {
            let uids: Vec<u64> = batch.all().map(|s| s.uid).collect();
            return Err(Error::NonFinite {
                iteration: it,
                detail: format!("losses {:?} on batch uids {uids:?}", obj.values),
            });
        }
        opt.step(bundle, &grads, &groups);
        log.push(obj.values);
    }
    state.iteration = k;
    Ok(log)
}

/// One curriculum step's summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub selected_domain: Option<usize>,
    pub entropies: BTreeMap<usize, f64>,
    pub pseudo_label_count: usize,
    pub mean_confidence: Option<f64>,
    /// Agreement with held-back ground truth; diagnostics only.
    pub pseudo_label_accuracy: Option<f64>,
    pub mean_losses: LossValues,
    pub pseudo_source_size: usize,
    pub remaining_targets: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub bundle: ModelBundle,
    pub state: CurriculumState,
    pub pretrain: PhaseReport,
    pub finetune: PhaseReport,
    pub steps: Vec<StepLog>,
    /// Adaptation losses for every iteration, across steps.
    pub losses: Vec<LossValues>,
    /// Rng after the run, for checkpointing.
    pub rng: ChaCha8Rng,
}

fn mean_losses(log: &[LossValues]) -> LossValues {
    if log.is_empty() {
        return LossValues::default();
    }
    let n = log.len() as f64;
    let mut m = LossValues::default();
    for v in log {
        m.mlp_ce += v.mlp_ce / n;
        m.edge_bce += v.edge_bce / n;
        m.node_ce += v.node_ce / n;
        m.adversarial += v.adversarial / n;
        m.total += v.total / n;
    }
    m
}

/// Observer called with the step index (0 after pre-training) and bundle.
pub type StepHook<'a> = dyn FnMut(usize, &ModelBundle, &ChaCha8Rng) -> Result<()> + 'a;

pub fn run_variant(task: &MtdaTask, config: &VariantConfig) -> Result<RunOutput> {
    run_variant_with(task, config, &mut |_, _, _| Ok(()))
}

/// Pre-training, `Q` curriculum steps and fine-tuning per the variant.
pub fn run_variant_with(
    task: &MtdaTask,
    config: &VariantConfig,
    hook: &mut StepHook,
) -> Result<RunOutput> {
    config.validate()?;
    task.validate()?;
    let profile = config.variant.profile();
    let train = &config.train;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let arch = config
        .arch
        .clone()
        .unwrap_or_else(|| default_arch(task.input, task.n_classes));
    if arch.n_classes != task.n_classes || arch.input.len() != task.input.len() {
        return Err(Error::Config("architecture does not match the task".into()));
    }
    let mut bundle = ModelBundle::new(arch, rng.random())?;

    let pretrain = supervised_phase(
        &mut bundle,
        &task.source.samples,
        train.pretrain_max_iterations,
        SupervisedMode::Pretrain,
        train,
        &mut rng,
    )?;
    info!(
        "{}: pretrained for {} iterations",
        config.variant, pretrain.iterations
    );
    hook(0, &bundle, &rng)?;

    let mut state = CurriculumState::new(&task.source, task.targets.iter().map(|t| t.domain_id));
    let mut steps = Vec::new();
    let mut losses = Vec::new();
    if profile.adapt {
        let n = task.num_targets();
        let mut q_total = train.q.unwrap_or(n);
        if profile.set_update == SetUpdateMode::Dcl && q_total > n {
            warn!("q = {q_total} exceeds the {n} target domains; capping");
            q_total = n;
        }
        let combined: Vec<Sample> = task.targets.iter().flat_map(|t| t.samples.iter().cloned()).collect();
        let settings = StageSettings {
            iterations: train.k,
            profile,
            weights: config.weights,
            source_domain: task.source.domain_id,
        };
        for q in 0..q_total {
            let (selected, entropies, pool) = match profile.set_update {
                SetUpdateMode::Cgct => (None, BTreeMap::new(), combined.clone()),
                SetUpdateMode::Dcl => {
                    let mut h = BTreeMap::new();
                    for &d in &state.remaining_targets {
                        let dom = task.target(d).expect("remaining ids come from the task");
                        h.insert(d, domain_entropy(&bundle, dom)?);
                    }
                    let d = select_next_domain(&h, config.direction())?;
                    state.selection_history.push(d);
                    let pool = task.target(d).expect("selected from the task").samples.clone();
                    (Some(d), h, pool)
                }
            };
            let log = adaptation_stage(&mut bundle, &mut state, &pool, &settings, train, &mut rng)?;

            let mut count = 0;
            let mut mean_conf = None;
            let mut pl_acc = None;
            if let Some(head) = profile.harvest {
                let opts = HarvestOptions {
                    tau: config.weights.tau,
                    head,
                    batch_size: train.batch_size,
                    context: train.gcn_context,
                    anchors: &state.original_source,
                    step: q,
                };
                let records = pseudo_label_stage(&bundle, &pool, &opts, &mut rng)?;
                count = records.len();
                if count > 0 {
                    mean_conf = Some(records.iter().map(|r| r.confidence).sum::<f64>() / count as f64);
                    let known: Vec<bool> = records
                        .iter()
                        .filter_map(|r| task.hidden_target_labels.get(&r.uid).map(|&l| l == r.assigned_label))
                        .collect();
                    if !known.is_empty() {
                        pl_acc = Some(known.iter().filter(|&&ok| ok).count() as f64 / known.len() as f64);
                    }
                }
                state = update_source_set(&state, &records, &pool, profile.set_update, selected)?;
            } else {
                if let Some(d) = selected {
                    state.remaining_targets.remove(&d);
                }
                state.q += 1;
            }
            let step = StepLog {
                step: q,
                selected_domain: selected,
                entropies,
                pseudo_label_count: count,
                mean_confidence: mean_conf,
                pseudo_label_accuracy: pl_acc,
                mean_losses: mean_losses(&log),
                pseudo_source_size: state.pseudo_source.len(),
                remaining_targets: state.remaining_targets.iter().copied().collect(),
            };
            info!(
                "{} step {q}: domain {:?}, {count} pseudo-labels (accuracy {:?}), pseudo-source {}",
                config.variant, selected, pl_acc, step.pseudo_source_size
            );
            steps.push(step);
            losses.extend(log);
            hook(q + 1, &bundle, &rng)?;
        }
    }

    let finetune = if profile.finetune {
        supervised_phase(
            &mut bundle,
            &state.pseudo_source,
            train.k_finetune,
            SupervisedMode::Finetune,
            train,
            &mut rng,
        )?
    } else {
        PhaseReport::default()
    };
    if !bundle.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok(RunOutput {
        bundle,
        state,
        pretrain,
        finetune,
        steps,
        losses,
        rng,
    })
}
