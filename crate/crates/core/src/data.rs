//! Samples, domains, multi-target tasks, the synthetic shift generator, image
//! folder ingestion and the paired mini-batch sampler.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};

/// Layout of one sample's feature buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    Vector {
        dim: usize,
    },
    /// Stored channel-major: `(channel, y, x)`.
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Vector { dim } => dim,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Arc<[f64]>,
    pub label: Option<usize>,
    pub domain_id: usize,
    pub uid: u64,
}

impl Sample {
    pub fn with_label(&self, label: usize) -> Sample {
        Sample {
            label: Some(label),
            ..self.clone()
        }
    }

    pub fn unlabeled(&self) -> Sample {
        Sample {
            label: None,
            ..self.clone()
        }
    }
}

/// Stacks sample features into a `n x len` matrix.
pub fn stack_features<'a, I>(samples: I) -> Matrix
where
    I: IntoIterator<Item = &'a Sample>,
{
    let samples: Vec<&Sample> = samples.into_iter().collect();
    let width = samples.first().map_or(0, |s| s.features.len());
    let mut m = Matrix::zeros((samples.len(), width));
    for (i, s) in samples.iter().enumerate() {
        for (j, &v) in s.features.iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub domain_id: usize,
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    pub fn new(name: impl Into<String>, domain_id: usize, samples: Vec<Sample>) -> Result<Self> {
        let name = name.into();
        if samples.is_empty() {
            return Err(Error::Dataset(format!("domain '{name}' is empty")));
        }
        if let Some(s) = samples.iter().find(|s| s.domain_id != domain_id) {
            return Err(Error::Dataset(format!(
                "sample {} in domain '{name}' has domain id {} (expected {domain_id})",
                s.uid, s.domain_id
            )));
        }
        if let Some(s) = samples
            .iter()
            .find(|s| s.features.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Dataset(format!(
                "sample {} in domain '{name}' has non-finite features",
                s.uid
            )));
        }
        Ok(Self {
            name,
            domain_id,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().filter_map(|s| s.label).collect()
    }

    /// Same domain with every label removed.
    pub fn strip_labels(&self) -> DomainDataset {
        DomainDataset {
            name: self.name.clone(),
            domain_id: self.domain_id,
            samples: self.samples.iter().map(Sample::unlabeled).collect(),
        }
    }
}

/// One labeled source domain and `N` unlabeled target domains.
#[derive(Debug, Clone)]
pub struct MtdaTask {
    pub source: DomainDataset,
    pub targets: Vec<DomainDataset>,
    pub n_classes: usize,
    pub input: InputShape,
    /// Labeled held-out split of the source, when available.
    pub source_eval: Option<DomainDataset>,
    /// Labeled held-out split per target, aligned with `targets`.
    pub target_eval: Vec<DomainDataset>,
    /// Ground truth for target training samples, keyed by uid. Only used for
    /// diagnostics; never read by the training path.
    pub hidden_target_labels: BTreeMap<u64, usize>,
}

impl MtdaTask {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Dataset("a task needs at least one target".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Dataset("a task needs at least two classes".into()));
        }
        let mut ids = BTreeSet::new();
        for d in std::iter::once(&self.source).chain(&self.targets) {
            if !ids.insert(d.domain_id) {
                return Err(Error::Dataset(format!(
                    "duplicate domain id {}",
                    d.domain_id
                )));
            }
        }
        if !self.source.is_fully_labeled() {
            return Err(Error::Dataset("source samples must all be labeled".into()));
        }
        if self.targets.iter().any(|t| t.samples.iter().any(|s| s.label.is_some())) {
            return Err(Error::Dataset("target training samples must be unlabeled".into()));
        }
        if !self.target_eval.is_empty() && self.target_eval.len() != self.targets.len() {
            return Err(Error::Dataset(
                "one evaluation split per target is required".into(),
            ));
        }
        let width = self.input.len();
        let mut uids = BTreeSet::new();
        let all = std::iter::once(&self.source)
            .chain(&self.targets)
            .chain(self.source_eval.iter())
            .chain(&self.target_eval);
        for d in all {
            for s in &d.samples {
                if s.features.len() != width {
                    return Err(Error::Dataset(format!(
                        "sample {} has {} features, expected {width}",
                        s.uid,
                        s.features.len()
                    )));
                }
                if let Some(l) = s.label {
                    if l >= self.n_classes {
                        return Err(Error::Dataset(format!(
                            "sample {} has label {l} outside [0, {})",
                            s.uid, self.n_classes
                        )));
                    }
                }
                if !uids.insert(s.uid) {
                    return Err(Error::Dataset(format!("duplicate uid {}", s.uid)));
                }
            }
        }
        for (t, e) in self.targets.iter().zip(&self.target_eval) {
            if t.domain_id != e.domain_id {
                return Err(Error::Dataset(format!(
                    "evaluation split for '{}' carries domain id {}",
                    t.name, e.domain_id
                )));
            }
            if !e.is_fully_labeled() {
                return Err(Error::Dataset(format!(
                    "evaluation split for '{}' must be labeled",
                    t.name
                )));
            }
        }
        Ok(())
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn target(&self, domain_id: usize) -> Option<&DomainDataset> {
        self.targets.iter().find(|t| t.domain_id == domain_id)
    }
}

/// Parameters of the synthetic multi-domain Gaussian-blob task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class_per_domain: usize,
    pub eval_samples_per_class: usize,
    /// One magnitude per target domain; 0 reproduces the source distribution.
    pub shift_magnitudes: Vec<f64>,
    pub noise_scale: f64,
    /// Norm of each class centroid.
    pub class_separation: f64,
    /// Rotation angle (radians) per unit of shift magnitude.
    pub rotation_per_unit: f64,
    /// Translation norm per unit of shift magnitude.
    pub translation_per_unit: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            dim: 16,
            samples_per_class_per_domain: 100,
            eval_samples_per_class: 50,
            shift_magnitudes: vec![0.2, 0.6, 1.2],
            noise_scale: 0.8,
            class_separation: 3.0,
            rotation_per_unit: 3.0,
            translation_per_unit: 5.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_classes < 2 {
            return fail("n_classes must be at least 2");
        }
        if self.dim < 2 {
            return fail("dim must be at least 2");
        }
        if self.samples_per_class_per_domain == 0 {
            return fail("samples_per_class_per_domain must be positive");
        }
        if self.eval_samples_per_class == 0 {
            return fail("eval_samples_per_class must be positive");
        }
        if self.shift_magnitudes.is_empty() {
            return fail("at least one target shift magnitude is required");
        }
        if self
            .shift_magnitudes
            .iter()
            .any(|m| !m.is_finite() || *m < 0.0)
        {
            return fail("shift magnitudes must be finite and non-negative");
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("class_separation", self.class_separation),
            ("rotation_per_unit", self.rotation_per_unit),
            ("translation_per_unit", self.translation_per_unit),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(&format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Target indices ordered from smallest to largest shift (ties by index).
    pub fn hardness_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.shift_magnitudes.len()).collect();
        idx.sort_by(|&a, &b| {
            self.shift_magnitudes[a]
                .total_cmp(&self.shift_magnitudes[b])
                .then(a.cmp(&b))
        });
        idx
    }
}

fn normal_vec(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Rigid map: rotation by `angle` in the plane `(u, v)` followed by
/// translation by `shift`.
struct RigidShift {
    u: Vec<f64>,
    v: Vec<f64>,
    angle: f64,
    shift: Vec<f64>,
}

impl RigidShift {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let a = dot(x, &self.u);
        let b = dot(x, &self.v);
        let (s, c) = self.angle.sin_cos();
        let da = (c - 1.0) * a - s * b;
        let db = s * a + (c - 1.0) * b;
        x.iter()
            .enumerate()
            .map(|(k, &xk)| xk + da * self.u[k] + db * self.v[k] + self.shift[k])
            .collect()
    }
}

/// Class centroids of the source and of each target, as produced by the
/// generator for `spec` (exposed for statistical tests).
pub fn synthetic_centroids(spec: &SyntheticSpec) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (centroids, shifts) = synthetic_geometry(spec, &mut rng);
    let targets = shifts
        .iter()
        .map(|t| centroids.iter().map(|c| t.apply(c)).collect())
        .collect();
    Ok((centroids, targets))
}

fn synthetic_geometry(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<RigidShift>) {
    let centroids: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            normalized(normal_vec(spec.dim, rng))
                .into_iter()
                .map(|x| x * spec.class_separation)
                .collect()
        })
        .collect();
    // One shared plane and translation direction, so that displacement grows
    // monotonically with the magnitude.
    let u = normalized(normal_vec(spec.dim, rng));
    let raw_v = normal_vec(spec.dim, rng);
    let proj = dot(&raw_v, &u);
    let v = normalized(raw_v.iter().zip(&u).map(|(a, b)| a - proj * b).collect());
    let dir = normalized(normal_vec(spec.dim, rng));
    let shifts = spec
        .shift_magnitudes
        .iter()
        .map(|&m| RigidShift {
            u: u.clone(),
            v: v.clone(),
            angle: m * spec.rotation_per_unit,
            shift: dir.iter().map(|x| x * m * spec.translation_per_unit).collect(),
        })
        .collect();
    (centroids, shifts)
}

/// Builds a synthetic task: class blobs for the source, rigidly shifted
/// blobs for every target, and labeled held-out splits for every domain.
/// Source uses domain id 0 and target `j` uses `j + 1`.
pub fn generate_synthetic_task(spec: &SyntheticSpec) -> Result<MtdaTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (centroids, shifts) = synthetic_geometry(spec, &mut rng);
    let mut next_uid = 0u64;

    let mut draw = |domain_id: usize,
                    per_class: usize,
                    shift: Option<&RigidShift>,
                    rng: &mut ChaCha8Rng|
     -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_class * spec.n_classes);
        for _ in 0..per_class {
            for (k, c) in centroids.iter().enumerate() {
                let noise = normal_vec(spec.dim, rng);
                let x: Vec<f64> = c
                    .iter()
                    .zip(&noise)
                    .map(|(ci, ni)| ci + spec.noise_scale * ni)
                    .collect();
                let x = match shift {
                    Some(t) => t.apply(&x),
                    None => x,
                };
                out.push(Sample {
                    features: x.into(),
                    label: Some(k),
                    domain_id,
                    uid: next_uid,
                });
                next_uid += 1;
            }
        }
        out
    };

    let source = DomainDataset::new(
        "source",
        0,
        draw(0, spec.samples_per_class_per_domain, None, &mut rng),
    )?;
    let source_eval = DomainDataset::new(
        "source",
        0,
        draw(0, spec.eval_samples_per_class, None, &mut rng),
    )?;
    let mut targets = Vec::new();
    let mut target_eval = Vec::new();
    let mut hidden = BTreeMap::new();
    for (j, shift) in shifts.iter().enumerate() {
        let id = j + 1;
        let name = format!("target{j}");
        let train = draw(id, spec.samples_per_class_per_domain, Some(shift), &mut rng);
        for s in &train {
            hidden.insert(s.uid, s.label.expect("generated with label"));
        }
        let train: Vec<Sample> = train.iter().map(Sample::unlabeled).collect();
        targets.push(DomainDataset::new(name.clone(), id, train)?);
        target_eval.push(DomainDataset::new(
            name,
            id,
            draw(id, spec.eval_samples_per_class, Some(shift), &mut rng),
        )?);
    }
    let task = MtdaTask {
        source,
        targets,
        n_classes: spec.n_classes,
        input: InputShape::Vector { dim: spec.dim },
        source_eval: Some(source_eval),
        target_eval,
        hidden_target_labels: hidden,
    };
    task.validate()?;
    Ok(task)
}

/// Options for [`load_image_folder`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFolderOptions {
    /// Resize every image to `(width, height)`; when `None` all images must
    /// share the size of the first decodable one.
    pub resize: Option<(u32, u32)>,
}

impl Default for ImageFolderOptions {
    fn default() -> Self {
        Self {
            resize: Some((28, 28)),
        }
    }
}

/// A decoded image folder plus the class names behind its label ids.
#[derive(Debug, Clone)]
pub struct ImageFolder {
    pub dataset: DomainDataset,
    pub class_names: Vec<String>,
    pub shape: InputShape,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        out.push(entry.path());
    }
    out.sort();
    Ok(out)
}

fn decode_image(path: &Path, opts: &ImageFolderOptions) -> Option<(Vec<f64>, u32, u32)> {
    let img = match image::open(path) {
        Ok(img) => img,
        Err(e) => {
            warn!("skipping unreadable image {}: {e}", path.display());
            return None;
        }
    };
    let img = match opts.resize {
        Some((w, h)) if img.width() != w || img.height() != h => {
            img.resize_exact(w, h, image::imageops::FilterType::Triangle)
        }
        _ => img,
    };
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut buf = vec![0.0; 3 * (w * h) as usize];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            buf[c * (w * h) as usize + (y * w + x) as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Some((buf, w, h))
}

/// Loads `<domain>/<class>/<file>` (labeled, labels from sorted class
/// directory names) or `<domain>/<file>` (unlabeled). Files are visited in
/// sorted path order. Uids are `(domain_id << 32) | index`.
pub fn load_image_folder(
    path: &Path,
    domain_id: usize,
    opts: &ImageFolderOptions,
) -> Result<ImageFolder> {
    let entries = sorted_entries(path)?;
    let class_dirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut files: Vec<(PathBuf, Option<usize>)> = Vec::new();
    let mut class_names = Vec::new();
    if class_dirs.is_empty() {
        files.extend(entries.iter().filter(|p| p.is_file()).map(|p| (p.clone(), None)));
    } else {
        for p in entries.iter().filter(|p| p.is_file()) {
            warn!("ignoring top-level file {} in labeled folder", p.display());
        }
        for (label, dir) in class_dirs.iter().enumerate() {
            class_names.push(
                dir.file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            );
            for f in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
                files.push((f, Some(label)));
            }
        }
    }

    let mut samples = Vec::new();
    let mut size: Option<(u32, u32)> = None;
    for (file, label) in files {
        let Some((buf, w, h)) = decode_image(&file, opts) else {
            continue;
        };
        match size {
            None => size = Some((w, h)),
            Some(s) if s != (w, h) => {
                warn!(
                    "skipping {}: size {w}x{h} differs from {}x{}",
                    file.display(),
                    s.0,
                    s.1
                );
                continue;
            }
            _ => {}
        }
        let uid = ((domain_id as u64) << 32) | samples.len() as u64;
        samples.push(Sample {
            features: buf.into(),
            label,
            domain_id,
            uid,
        });
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no decodable images under {}",
            path.display()
        )));
    }
    let (w, h) = size.expect("at least one image decoded");
    Ok(ImageFolder {
        dataset: DomainDataset::new(name, domain_id, samples)?,
        class_names,
        shape: InputShape::Image {
            channels: 3,
            height: h as usize,
            width: w as usize,
        },
    })
}

/// How the target half of a batch is drawn from a pool spanning several
/// domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSampling {
    /// Uniform over the combined pool.
    #[default]
    Combined,
    /// Equal share per domain present in the pool.
    Stratified,
}

#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub source_half: Vec<Sample>,
    pub target_half: Vec<Sample>,
}

impl MiniBatch {
    pub fn batch_size(&self) -> usize {
        self.source_half.len()
    }

    /// Source half followed by target half.
    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.source_half.iter().chain(self.target_half.iter())
    }

    pub fn source_labels(&self) -> Vec<usize> {
        self.source_half
            .iter()
            .map(|s| s.label.expect("source half is labeled"))
            .collect()
    }
}

/// Shuffled pass over `0..len`, reshuffled whenever exhausted.
#[derive(Debug, Clone)]
struct EpochCursor {
    order: Vec<usize>,
    pos: usize,
    warned: bool,
}

impl EpochCursor {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self {
            order,
            pos: 0,
            warned: false,
        }
    }

    fn take(&mut self, count: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
        let len = self.order.len();
        if len < count {
            if !self.warned {
                warn!("pool of {len} is smaller than {count}; sampling with replacement");
                self.warned = true;
            }
            out.extend((0..count).map(|_| rng.random_range(0..len)));
            return;
        }
        for _ in 0..count {
            if self.pos == len {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
    }
}

/// Stateful sampler yielding `B` source and `B` target draws per call;
/// within an epoch every pool element is drawn once.
#[derive(Debug, Clone)]
pub struct MiniBatchSampler {
    batch_size: usize,
    sampling: TargetSampling,
    source: Option<EpochCursor>,
    source_len: usize,
    targets: BTreeMap<usize, (Vec<usize>, EpochCursor)>,
    target_len: usize,
}

impl MiniBatchSampler {
    pub fn new(batch_size: usize, sampling: TargetSampling) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {batch_size}"
            )));
        }
        Ok(Self {
            batch_size,
            sampling,
            source: None,
            source_len: 0,
            targets: BTreeMap::new(),
            target_len: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Draws one source index list only (used by supervised phases).
    pub fn next_source_indices(&mut self, pool_len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if pool_len == 0 {
            return Err(Error::Dataset("cannot sample from an empty pool".into()));
        }
        if self.source.is_none() || self.source_len != pool_len {
            self.source = Some(EpochCursor::new(pool_len, rng));
            self.source_len = pool_len;
        }
        let mut idx = Vec::with_capacity(self.batch_size);
        self.source
            .as_mut()
            .expect("initialised above")
            .take(self.batch_size, rng, &mut idx);
        Ok(idx)
    }

    fn next_target_indices(&mut self, pool: &[Sample], rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.targets.is_empty() || self.target_len != pool.len() {
            self.targets.clear();
            self.target_len = pool.len();
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            match self.sampling {
                TargetSampling::Combined => {
                    groups.insert(0, (0..pool.len()).collect());
                }
                TargetSampling::Stratified => {
                    for (i, s) in pool.iter().enumerate() {
                        groups.entry(s.domain_id).or_default().push(i);
                    }
                }
            }
            for (k, members) in groups {
                let cursor = EpochCursor::new(members.len(), rng);
                self.targets.insert(k, (members, cursor));
            }
        }
        let g = self.targets.len();
        let base = self.batch_size / g;
        let extra = self.batch_size % g;
        let mut out = Vec::with_capacity(self.batch_size);
        for (n, (members, cursor)) in self.targets.values_mut().enumerate() {
            let want = base + usize::from(n < extra);
            let mut local = Vec::with_capacity(want);
            cursor.take(want, rng, &mut local);
            out.extend(local.into_iter().map(|i| members[i]));
        }
        out
    }

    /// Draws the next paired batch from `pseudo_source` and `target_pool`.
    pub fn next_batch(
        &mut self,
        pseudo_source: &[Sample],
        target_pool: &[Sample],
        rng: &mut ChaCha8Rng,
    ) -> Result<MiniBatch> {
        if target_pool.is_empty() {
            return Err(Error::Dataset("target pool is empty".into()));
        }
        if let Some(s) = pseudo_source.iter().find(|s| s.label.is_none()) {
            return Err(Error::Contract(format!(
                "pseudo-source sample {} carries no label",
                s.uid
            )));
        }
        let src = self.next_source_indices(pseudo_source.len(), rng)?;
        let tgt = self.next_target_indices(target_pool, rng);
        Ok(MiniBatch {
            source_half: src.into_iter().map(|i| pseudo_source[i].clone()).collect(),
            target_half: tgt
                .into_iter()
                .map(|i| target_pool[i].unlabeled())
                .collect(),
        })
    }
}

/// One-shot convenience over [`MiniBatchSampler`].
pub fn sample_minibatch(
    pseudo_source: &[Sample],
    target_pool: &[Sample],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MiniBatch> {
    MiniBatchSampler::new(batch_size, TargetSampling::Combined)?.next_batch(
        pseudo_source,
        target_pool,
        rng,
    )
}
