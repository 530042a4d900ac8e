//! The trainable networks: feature extractor, MLP head, the GCN head's edge
//! and node networks, and the conditional domain discriminator behind a
//! gradient reversal layer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Gradients, Matrix, Tape, Var};
use crate::data::InputShape;
use crate::error::{Error, Result};
use crate::graph::{edge_scores_var, propagate_nodes_var, AffinityMatrix};
use crate::nn::{Activation, Linear, Mlp, Mode, Module, SmallConv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Two fully-connected layers over vector inputs.
    Mlp,
    /// Two conv + two fc layers over small square RGB images.
    SmallConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input: InputShape,
    pub backbone: BackboneKind,
    pub backbone_hidden: usize,
    pub backbone_dropout: f64,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub edge_hidden: usize,
    pub node_hidden: usize,
    pub disc_hidden: usize,
    pub disc_dropout: f64,
}

impl ArchConfig {
    /// Vector-input defaults: `d_in -> 64 -> 32` backbone.
    pub fn for_vectors(dim: usize, n_classes: usize) -> Self {
        Self {
            input: InputShape::Vector { dim },
            backbone: BackboneKind::Mlp,
            backbone_hidden: 64,
            backbone_dropout: 0.0,
            feature_dim: 32,
            n_classes,
            edge_hidden: 32,
            node_hidden: 32,
            disc_hidden: 100,
            disc_dropout: 0.5,
        }
    }

    /// The small conv net for 28x28x3 inputs with 100-d features.
    pub fn for_small_images(n_classes: usize) -> Self {
        Self {
            input: InputShape::Image {
                channels: 3,
                height: 28,
                width: 28,
            },
            backbone: BackboneKind::SmallConv,
            backbone_hidden: 100,
            backbone_dropout: 0.2,
            feature_dim: 100,
            n_classes,
            edge_hidden: 100,
            node_hidden: 100,
            disc_hidden: 100,
            disc_dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return fail("model needs at least two classes".into());
        }
        if self.feature_dim == 0 || self.edge_hidden == 0 || self.node_hidden == 0 {
            return fail("layer widths must be positive".into());
        }
        if self.disc_hidden == 0 || self.backbone_hidden == 0 {
            return fail("layer widths must be positive".into());
        }
        for (name, p) in [
            ("backbone_dropout", self.backbone_dropout),
            ("disc_dropout", self.disc_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        match (self.backbone, self.input) {
            (BackboneKind::Mlp, InputShape::Vector { dim }) if dim > 0 => Ok(()),
            (BackboneKind::Mlp, InputShape::Image { .. }) => Ok(()),
            (
                BackboneKind::SmallConv,
                InputShape::Image {
                    height, width, ..
                },
            ) if height == width && SmallConv::final_spatial(height).is_some() => Ok(()),
            (kind, input) => fail(format!("backbone {kind:?} cannot consume input {input:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    Mlp(Mlp),
    SmallConv(SmallConv),
}

impl Backbone {
    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: &mut Mode) -> Var {
        match self {
            Backbone::Mlp(m) => m.forward(tape, vars, x, mode),
            Backbone::SmallConv(c) => c.forward(tape, vars, x, mode),
        }
    }
}

impl Module for Backbone {
    fn params(&self) -> Vec<&Matrix> {
        match self {
            Backbone::Mlp(m) => m.params(),
            Backbone::SmallConv(c) => c.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Backbone::Mlp(m) => m.params_mut(),
            Backbone::SmallConv(c) => c.params_mut(),
        }
    }
}

/// The five independently optimized parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    FeatureExtractor,
    MlpHead,
    EdgeNet,
    NodeNet,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::FeatureExtractor,
        ParamGroup::MlpHead,
        ParamGroup::EdgeNet,
        ParamGroup::NodeNet,
        ParamGroup::Discriminator,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub feature_extractor: Backbone,
    pub mlp_head: Linear,
    pub edge_net: Mlp,
    pub node_net: Mlp,
    pub discriminator: Mlp,
}

/// How the reversal coefficient grows over an adaptation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrlSchedule {
    #[default]
    Ramp,
    Constant,
}

/// Gradient reversal strength at a given point of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrlCoefficient {
    pub weight: f64,
    /// Progress `p` in `[0, 1]` through the current stage.
    pub progress: f64,
    pub schedule: GrlSchedule,
}

impl GrlCoefficient {
    pub fn new(weight: f64, progress: f64, schedule: GrlSchedule) -> Self {
        Self {
            weight,
            progress: progress.clamp(0.0, 1.0),
            schedule,
        }
    }

    pub fn constant(weight: f64) -> Self {
        Self::new(weight, 1.0, GrlSchedule::Constant)
    }

    /// `weight * (2 / (1 + exp(-10 p)) - 1)` for the ramp.
    pub fn effective(&self) -> f64 {
        match self.schedule {
            GrlSchedule::Constant => self.weight,
            GrlSchedule::Ramp => {
                self.weight * (2.0 / (1.0 + (-10.0 * self.progress).exp()) - 1.0)
            }
        }
    }
}

/// Parameter leaves of a bundle registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundBundle {
    groups: Vec<Vec<Var>>,
}

impl BoundBundle {
    pub fn group(&self, g: ParamGroup) -> &[Var] {
        &self.groups[g.index()]
    }

    pub fn gradients(&self, grads: &Gradients) -> GroupGradients {
        GroupGradients {
            groups: self.groups.iter().map(|vs| grads.get_many(vs)).collect(),
        }
    }
}

/// Gradients for each parameter group, in `Module::params` order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGradients {
    groups: Vec<Vec<Matrix>>,
}

impl GroupGradients {
    pub fn group(&self, g: ParamGroup) -> &[Matrix] {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<Matrix> {
        &mut self.groups[g.index()]
    }

    pub fn scale_group(&mut self, g: ParamGroup, factor: f64) {
        for m in &mut self.groups[g.index()] {
            m.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.groups
            .iter()
            .flatten()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Tape nodes of one GCN-head forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GcnVars {
    pub raw: Var,
    pub normalized: Var,
    pub logits: Var,
}

impl ModelBundle {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = arch.feature_dim;
        let nc = arch.n_classes;
        let feature_extractor = match arch.backbone {
            BackboneKind::Mlp => Backbone::Mlp(Mlp::new(
                &[arch.input.len(), arch.backbone_hidden, d],
                Activation::Relu,
                Activation::Relu,
                arch.backbone_dropout,
                &mut rng,
            )),
            BackboneKind::SmallConv => {
                let InputShape::Image {
                    channels, height, ..
                } = arch.input
                else {
                    unreachable!("validated above")
                };
                Backbone::SmallConv(
                    SmallConv::new(channels, height, d, arch.backbone_dropout, &mut rng)
                        .expect("validated geometry"),
                )
            }
        };
        let mlp_head = Linear::new(d, nc, &mut rng);
        let edge_net = Mlp::new(
            &[d, arch.edge_hidden, arch.edge_hidden, 1],
            Activation::Relu,
            Activation::Identity,
            0.0,
            &mut rng,
        );
        let node_net = Mlp::new(
            &[2 * d, arch.node_hidden, nc],
            Activation::Relu,
            Activation::Identity,
            0.0,
            &mut rng,
        );
        let discriminator = Mlp::new(
            &[d * nc, arch.disc_hidden, arch.disc_hidden, 1],
            Activation::Relu,
            Activation::Identity,
            arch.disc_dropout,
            &mut rng,
        );
        Ok(Self {
            arch,
            feature_extractor,
            mlp_head,
            edge_net,
            node_net,
            discriminator,
        })
    }

    pub fn module(&self, g: ParamGroup) -> &dyn Module {
        match g {
            ParamGroup::FeatureExtractor => &self.feature_extractor,
            ParamGroup::MlpHead => &self.mlp_head,
            ParamGroup::EdgeNet => &self.edge_net,
            ParamGroup::NodeNet => &self.node_net,
            ParamGroup::Discriminator => &self.discriminator,
        }
    }

    pub fn module_mut(&mut self, g: ParamGroup) -> &mut dyn Module {
        match g {
            ParamGroup::FeatureExtractor => &mut self.feature_extractor,
            ParamGroup::MlpHead => &mut self.mlp_head,
            ParamGroup::EdgeNet => &mut self.edge_net,
            ParamGroup::NodeNet => &mut self.node_net,
            ParamGroup::Discriminator => &mut self.discriminator,
        }
    }

    pub fn num_params(&self) -> usize {
        ParamGroup::ALL
            .iter()
            .map(|&g| self.module(g).num_params())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL.iter().all(|&g| {
            self.module(g)
                .params()
                .iter()
                .all(|m| m.iter().all(|v| v.is_finite()))
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBundle {
        BoundBundle {
            groups: ParamGroup::ALL
                .iter()
                .map(|&g| self.module(g).bind(tape))
                .collect(),
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        let want = self.arch.input.len();
        if x.ncols() != want {
            return Err(Error::Config(format!(
                "input has {} features, backbone expects {want}",
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::Shape("empty input batch".into()));
        }
        Ok(())
    }

    pub fn features_var(
        &self,
        tape: &mut Tape,
        bound: &BoundBundle,
        x: &Matrix,
        mode: &mut Mode,
    ) -> Result<Var> {
        self.check_input(x)?;
        let xv = tape.constant(x.clone());
        Ok(self.feature_extractor.forward(
            tape,
            bound.group(ParamGroup::FeatureExtractor),
            xv,
            mode,
        ))
    }

    pub fn mlp_logits_var(&self, tape: &mut Tape, bound: &BoundBundle, f: Var) -> Var {
        Linear::apply(tape, bound.group(ParamGroup::MlpHead), f)
    }

    /// Edge scores -> diagonal replaced by self-loops -> normalization ->
    /// node propagation.
    pub fn gcn_var(
        &self,
        tape: &mut Tape,
        bound: &BoundBundle,
        f: Var,
        mode: &mut Mode,
    ) -> Result<GcnVars> {
        let scores = edge_scores_var(
            tape,
            f,
            &self.edge_net,
            bound.group(ParamGroup::EdgeNet),
            mode,
        )?;
        let n = tape.shape(scores).0;
        let off_diag = Matrix::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 });
        let raw = tape.mul_const(scores, off_diag);
        let normalized = tape.sym_normalize(raw);
        let logits = propagate_nodes_var(
            tape,
            f,
            normalized,
            &self.node_net,
            bound.group(ParamGroup::NodeNet),
            mode,
        )?;
        Ok(GcnVars {
            raw,
            normalized,
            logits,
        })
    }

    /// Discriminator logit on `flatten(f ⊗ probs)`, reversed gradients at
    /// its input.
    pub fn discriminator_var(
        &self,
        tape: &mut Tape,
        bound: &BoundBundle,
        f: Var,
        probs: Var,
        grl: GrlCoefficient,
        mode: &mut Mode,
    ) -> Var {
        let h = tape.row_outer(f, probs);
        let h = tape.grad_reverse(h, grl.effective());
        self.discriminator
            .forward(tape, bound.group(ParamGroup::Discriminator), h, mode)
    }

    /// Features `B x d` and MLP-head logits `B x n_c`.
    pub fn classifier_forward(&self, x: &Matrix, mode: &mut Mode) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let f = self.features_var(&mut tape, &bound, x, mode)?;
        let g = self.mlp_logits_var(&mut tape, &bound, f);
        Ok((tape.value(f).clone(), tape.value(g).clone()))
    }

    /// MLP-head class probabilities in eval mode.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let (_, logits) = self.classifier_forward(x, &mut Mode::Eval)?;
        Ok(softmax_rows(&logits))
    }

    pub fn gcn_classifier_forward(
        &self,
        x: &Matrix,
        mode: &mut Mode,
    ) -> Result<(AffinityMatrix, Matrix)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let f = self.features_var(&mut tape, &bound, x, mode)?;
        let gcn = self.gcn_var(&mut tape, &bound, f, mode)?;
        let degree = tape
            .value(gcn.raw)
            .rows()
            .into_iter()
            .map(|r| r.sum() + 1.0)
            .collect();
        Ok((
            AffinityMatrix {
                raw: tape.value(gcn.raw).clone(),
                normalized: tape.value(gcn.normalized).clone(),
                degree,
            },
            tape.value(gcn.logits).clone(),
        ))
    }

    pub fn discriminator_forward(
        &self,
        f: &Matrix,
        mlp_probs: &Matrix,
        grl: GrlCoefficient,
        mode: &mut Mode,
    ) -> Result<Matrix> {
        if f.nrows() != mlp_probs.nrows()
            || f.ncols() != self.arch.feature_dim
            || mlp_probs.ncols() != self.arch.n_classes
        {
            return Err(Error::Shape(format!(
                "discriminator expects B x {} features and B x {} probabilities, got {:?} and {:?}",
                self.arch.feature_dim,
                self.arch.n_classes,
                f.dim(),
                mlp_probs.dim()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let fv = tape.constant(f.clone());
        let pv = tape.constant(mlp_probs.clone());
        let out = self.discriminator_var(&mut tape, &bound, fv, pv, grl, mode);
        Ok(tape.value(out).clone())
    }
}

/// Serialized state of a `ChaCha8Rng`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| Error::Checkpoint(format!("rng state: {m}"));
        if self.seed.len() != 64 {
            return Err(bad("seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|_| bad("seed is not hex"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("bad word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

pub const CHECKPOINT_FORMAT: &str = "cgct-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container: format tag, version, all five parameter sets with the
/// architecture, and an optional rng state. Floats are written in shortest
/// round-trip form, so save -> load -> save reproduces the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub bundle: ModelBundle,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(bundle: ModelBundle, rng: Option<&ChaCha8Rng>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            bundle,
            rng: rng.map(RngState::capture),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut s = serde_json::to_vec_pretty(self)?;
        s.push(b'\n');
        Ok(s)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format '{}'", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        ck.bundle.arch.validate()?;
        let fresh = ModelBundle::new(ck.bundle.arch.clone(), 0)?;
        for g in ParamGroup::ALL {
            let want: Vec<_> = fresh.module(g).params().iter().map(|m| m.dim()).collect();
            let got: Vec<_> = ck.bundle.module(g).params().iter().map(|m| m.dim()).collect();
            if want != got {
                return Err(Error::Checkpoint(format!(
                    "parameter shapes of {g:?} do not match the architecture"
                )));
            }
        }
        if let Some(r) = &ck.rng {
            r.restore()?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
