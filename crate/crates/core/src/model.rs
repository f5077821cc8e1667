//! Encoder–decoder network with residual encoder stages, skip-connected
//! decoder, squeeze-and-excitation gating and exchangeable task heads.
//!
//! Topology for `depth = D` and widths `c_s = base_width · 2^s`:
//!
//! ```text
//! stem(conv3x3+BN+ReLU) → stage 0 (res blocks @ c_0, full res)
//!   → [maxpool → stage s (res blocks @ c_s)] for s = 1..=D
//! decoder level s = D-1..0: upsample ×2, concat skip_s, 2×(conv3x3+BN+ReLU), SE
//! head: reconstruction = conv1x1 → 1 channel
//!       segmentation   = conv3x3+ReLU → conv1x1 → num_classes
//! ```
//!
//! Parameters live in a flat, ordered [`ModelParameters`] list; the layer
//! graph is rebuilt from [`ModelConfig`] and addresses tensors by index.

use crate::error::{Error, Result};
use crate::nn::layers::{self, BnBatchStats, BnCache, SeCache, SeGrads, SeWeights};
use crate::nn::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Reconstruction,
    Segmentation,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Reconstruction => "reconstruction",
            Head::Segmentation => "segmentation",
        })
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(Head::Reconstruction),
            "segmentation" => Ok(Head::Segmentation),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of 2× down-sampling stages.
    pub depth: usize,
    pub blocks_per_stage: usize,
    pub se_reduction: usize,
    pub head: Head,
    pub num_classes: usize,
    /// Reconstruction output is the input plus the head's correction.
    pub input_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            base_width: 16,
            depth: 4,
            blocks_per_stage: 1,
            se_reduction: 16,
            head: Head::Reconstruction,
            num_classes: 2,
            input_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("model.in_channels must be ≥ 1".into()));
        }
        if self.base_width < 4 {
            return Err(Error::Config(format!("model.base_width = {} < 4", self.base_width)));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("model.depth = {} < 2", self.depth)));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("model.blocks_per_stage must be ≥ 1".into()));
        }
        if self.se_reduction == 0 || self.base_width % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "model.se_reduction = {} does not divide base_width {}",
                self.se_reduction, self.base_width
            )));
        }
        if self.head == Head::Segmentation && self.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be ≥ 2 for segmentation".into()));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn with_head(&self, head: Head) -> ModelConfig {
        ModelConfig { head, ..self.clone() }
    }

    /// Hex digest over every field.
    pub fn hash(&self) -> String {
        config_digest(&format!("{self:?}"))
    }

    /// Hex digest over every field that shapes the body.
    pub fn body_hash(&self) -> String {
        ModelConfig { head: Head::Reconstruction, input_skip: true, ..self.clone() }.hash()
    }

    pub fn output_channels(&self) -> usize {
        match self.head {
            Head::Reconstruction => 1,
            Head::Segmentation => self.num_classes,
        }
    }
}

pub(crate) fn config_digest(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

/// Where a parameter set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Random,
    ProxyPretrained,
    TerrainPretrained,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Random => "random",
            Provenance::ProxyPretrained => "proxy-pretrained",
            Provenance::TerrainPretrained => "terrain-pretrained",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Provenance::Random),
            "proxy-pretrained" => Ok(Provenance::ProxyPretrained),
            "terrain-pretrained" => Ok(Provenance::TerrainPretrained),
            other => Err(Error::Config(format!("unknown provenance `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    ConvWeight,
    FcWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl Role {
    pub fn trainable(self) -> bool {
        !matches!(self, Role::BnMean | Role::BnVar)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::ConvWeight => "conv_weight",
            Role::FcWeight => "fc_weight",
            Role::Bias => "bias",
            Role::BnGamma => "bn_gamma",
            Role::BnBeta => "bn_beta",
            Role::BnMean => "bn_running_mean",
            Role::BnVar => "bn_running_var",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Some(match s {
            "conv_weight" => Role::ConvWeight,
            "fc_weight" => Role::FcWeight,
            "bias" => Role::Bias,
            "bn_gamma" => Role::BnGamma,
            "bn_beta" => Role::BnBeta,
            "bn_running_mean" => Role::BnMean,
            "bn_running_var" => Role::BnVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub data: Vec<T>,
}

impl<T> NamedTensor<T> {
    pub fn is_head(&self) -> bool {
        self.name.starts_with("head.")
    }
}

/// Named, shaped parameter set plus the configuration it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T = f32> {
    pub config: ModelConfig,
    provenance: Provenance,
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Real> ModelParameters<T> {
    pub(crate) fn from_parts(config: ModelConfig, provenance: Provenance, tensors: Vec<NamedTensor<T>>) -> Result<Self> {
        let expected = Network::new(&config)?.specs;
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors for config, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (spec, t) in expected.iter().zip(&tensors) {
            if spec.name != t.name || spec.shape != t.shape || t.data.len() != spec.numel() {
                return Err(Error::Shape(format!("tensor `{}` does not match layer table", t.name)));
            }
        }
        Ok(ModelParameters { config, provenance, tensors })
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Tags a randomly initialized set with where its weights came from.
    /// A set may be re-tagged only while it is still `random`.
    pub fn set_provenance(&mut self, tag: Provenance) -> Result<()> {
        if self.provenance != Provenance::Random && self.provenance != tag {
            return Err(Error::Contract(format!(
                "provenance already set to {}, refusing {}",
                self.provenance, tag
            )));
        }
        self.provenance = tag;
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.role.trainable()).map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            provenance: self.provenance,
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    role: t.role,
                    data: t.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
                })
                .collect(),
        }
    }

    /// Sets every head tensor to zero.
    pub fn zero_head(&mut self) {
        for t in self.tensors.iter_mut().filter(|t| t.is_head()) {
            t.data.fill(T::zero());
        }
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients { tensors: self.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect() }
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_bn_stats(&mut self, stats: &[BnUpdate<T>]) {
        let m = T::lit(layers::BN_MOMENTUM);
        let keep = T::one() - m;
        for u in stats {
            for (r, b) in self.tensors[u.mean].data.iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * *b;
            }
            for (r, b) in self.tensors[u.var].data.iter_mut().zip(&u.stats.var_unbiased) {
                *r = keep * *r + m * *b;
            }
        }
    }
}

/// Per-tensor gradients aligned with [`ModelParameters::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| {
                let x = v.to_f64().unwrap();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for v in self.tensors.iter_mut().flat_map(|g| g.iter_mut()) {
            *v *= s;
        }
    }
}

// ---------------------------------------------------------------------------
// Layer table
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    w: usize,
    b: Option<usize>,
    cout: usize,
    k: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnRef {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBnRef {
    conv: ConvRef,
    bn: BnRef,
    relu: bool,
}

#[derive(Clone, Copy, Debug)]
struct SeRef {
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    hidden: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResBlockRef {
    c1: ConvBnRef,
    c2: ConvBnRef,
    shortcut: Option<ConvBnRef>,
    se: SeRef,
}

#[derive(Clone, Copy, Debug)]
struct DecBlockRef {
    c_up: usize,
    c1: ConvBnRef,
    c2: ConvBnRef,
    se: SeRef,
}

#[derive(Clone, Copy, Debug)]
enum HeadRef {
    Reconstruction { logits: ConvRef },
    Segmentation { block: ConvRef, logits: ConvRef },
}

/// Layer graph derived from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub specs: Vec<ParamSpec>,
    stem: ConvBnRef,
    stages: Vec<Vec<ResBlockRef>>,
    decoder: Vec<DecBlockRef>,
    head: HeadRef,
}

struct TableBuilder {
    specs: Vec<ParamSpec>,
}

impl TableBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, role: Role, fan_in: usize) -> usize {
        self.specs.push(ParamSpec { name, shape, role, fan_in });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> ConvRef {
        let w = self.push(format!("{name}.weight"), vec![cout, cin, k, k], Role::ConvWeight, cin * k * k);
        let b = bias.then(|| self.push(format!("{name}.bias"), vec![cout], Role::Bias, 0));
        ConvRef { w, b, cout, k }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnRef {
        BnRef {
            gamma: self.push(format!("{name}.gamma"), vec![c], Role::BnGamma, 0),
            beta: self.push(format!("{name}.beta"), vec![c], Role::BnBeta, 0),
            mean: self.push(format!("{name}.running_mean"), vec![c], Role::BnMean, 0),
            var: self.push(format!("{name}.running_var"), vec![c], Role::BnVar, 0),
        }
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, relu: bool) -> ConvBnRef {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, k, false);
        let bn = self.bn(&format!("{name}.bn"), cout);
        ConvBnRef { conv, bn, relu }
    }

    fn se(&mut self, name: &str, c: usize, reduction: usize) -> SeRef {
        let hidden = c / reduction;
        SeRef {
            fc1_w: self.push(format!("{name}.fc1.weight"), vec![hidden, c], Role::FcWeight, c),
            fc1_b: self.push(format!("{name}.fc1.bias"), vec![hidden], Role::Bias, 0),
            fc2_w: self.push(format!("{name}.fc2.weight"), vec![c, hidden], Role::FcWeight, hidden),
            fc2_b: self.push(format!("{name}.fc2.bias"), vec![c], Role::Bias, 0),
            hidden,
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, reduction: usize) -> ResBlockRef {
        let c1 = self.conv_bn(&format!("{name}.conv1"), cin, cout, 3, true);
        let c2 = self.conv_bn(&format!("{name}.conv2"), cout, cout, 3, false);
        let shortcut = (cin != cout).then(|| self.conv_bn(&format!("{name}.shortcut"), cin, cout, 1, false));
        let se = self.se(&format!("{name}.se"), cout, reduction);
        ResBlockRef { c1, c2, shortcut, se }
    }
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut tb = TableBuilder { specs: Vec::new() };
        let r = config.se_reduction;
        let stem = tb.conv_bn("enc.stem", config.in_channels, config.width(0), 3, true);
        let mut stages = Vec::with_capacity(config.depth + 1);
        for s in 0..=config.depth {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                let cin = if b == 0 && s > 0 { config.width(s - 1) } else { config.width(s) };
                blocks.push(tb.res_block(&format!("enc.stage{s}.block{b}"), cin, config.width(s), r));
            }
            stages.push(blocks);
        }
        let mut decoder = Vec::with_capacity(config.depth);
        for s in (0..config.depth).rev() {
            let c_up = config.width(s + 1);
            let cout = config.width(s);
            let c1 = tb.conv_bn(&format!("dec.level{s}.conv1"), c_up + cout, cout, 3, true);
            let c2 = tb.conv_bn(&format!("dec.level{s}.conv2"), cout, cout, 3, true);
            let se = tb.se(&format!("dec.level{s}.se"), cout, r);
            decoder.push(DecBlockRef { c_up, c1, c2, se });
        }
        // decoder[i] handles level depth-1-i; store by level instead.
        decoder.reverse();
        let c0 = config.width(0);
        let head = match config.head {
            Head::Reconstruction => HeadRef::Reconstruction { logits: tb.conv("head.recon", c0, 1, 1, true) },
            Head::Segmentation => HeadRef::Segmentation {
                block: tb.conv("head.seg_block", c0, c0, 3, true),
                logits: tb.conv("head.seg_logits", c0, config.num_classes, 1, true),
            },
        };
        Ok(Network { config: config.clone(), specs: tb.specs, stem, stages, decoder, head })
    }
}

fn init_tensor(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = spec.numel();
    match spec.role {
        Role::ConvWeight | Role::FcWeight => {
            let std = (2.0 / spec.fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (z * std) as f32
                })
                .collect()
        }
        Role::Bias | Role::BnBeta | Role::BnMean => vec![0.0; n],
        Role::BnGamma | Role::BnVar => vec![1.0; n],
    }
}

/// Deterministic He-style initialization; provenance `random`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParameters<f32>> {
    let net = Network::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = net
        .specs
        .iter()
        .map(|spec| NamedTensor {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            role: spec.role,
            data: init_tensor(spec, &mut rng),
        })
        .collect();
    Ok(ModelParameters { config: config.clone(), provenance: Provenance::Random, tensors })
}

/// Copies every non-head tensor from `source` into a model with `target_head`;
/// the new head is freshly initialized from `head_seed`.
pub fn transfer_weights(source: &ModelParameters<f32>, target_head: Head, head_seed: u64) -> Result<ModelParameters<f32>> {
    let target_cfg = source.config.with_head(target_head);
    let mut target = build_model(&target_cfg, head_seed)?;
    let body: Vec<&NamedTensor<f32>> = source.tensors.iter().filter(|t| !t.is_head()).collect();
    let mut copied = 0;
    for t in target.tensors.iter_mut().filter(|t| !t.is_head()) {
        let src = body
            .get(copied)
            .filter(|s| s.name == t.name)
            .ok_or_else(|| Error::Transfer(format!("source has no tensor `{}`", t.name)))?;
        if src.shape != t.shape {
            return Err(Error::Transfer(format!(
                "shape mismatch for `{}`: {:?} vs {:?}",
                t.name, src.shape, t.shape
            )));
        }
        t.data.clone_from(&src.data);
        copied += 1;
    }
    if copied != body.len() {
        return Err(Error::Transfer("source carries tensors the target lacks".into()));
    }
    target.provenance = source.provenance;
    Ok(target)
}

/// Checks that two configurations agree on everything except the head.
pub fn check_transfer_compatible(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    if a.body_hash() != b.body_hash() {
        return Err(Error::Transfer(format!("configs differ beyond the head: {a:?} vs {b:?}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics for one BN layer, to be folded into running buffers.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    mean: usize,
    var: usize,
    stats: BnBatchStats<T>,
}

/// Encoder activations per stage (`stages[s]` has `c_s` channels at `H/2^s`).
#[derive(Clone, Debug)]
pub struct FeatureMaps<T> {
    pub stages: Vec<Tensor<T>>,
    pub decoder_out: Tensor<T>,
}

struct ConvBnCache<T> {
    x: Tensor<T>,
    bn: Option<BnCache<T>>,
    y: Tensor<T>,
}

struct ResCache<T> {
    c1: ConvBnCache<T>,
    c2: ConvBnCache<T>,
    se: SeCache<T>,
    sc: Option<ConvBnCache<T>>,
    out: Tensor<T>,
}

struct StageCache<T> {
    pool_arg: Option<(Vec<u8>, usize, usize)>,
    blocks: Vec<ResCache<T>>,
}

struct DecCache<T> {
    c1: ConvBnCache<T>,
    c2: ConvBnCache<T>,
    se: SeCache<T>,
}

enum HeadCache<T> {
    Reconstruction,
    Segmentation { hidden: Tensor<T> },
}

struct NetCache<T> {
    stem: ConvBnCache<T>,
    stages: Vec<StageCache<T>>,
    decoder: Vec<DecCache<T>>,
    head: HeadCache<T>,
}

pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    pub features: FeatureMaps<T>,
    pub bn_updates: Vec<BnUpdate<T>>,
    cache: Option<NetCache<T>>,
}

struct Ctx<'a, T> {
    p: &'a [NamedTensor<T>],
    mode: Mode,
    updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    fn t(&self, i: usize) -> &'a [T] {
        &self.p[i].data
    }

    fn conv(&self, r: &ConvRef, x: &Tensor<T>) -> Tensor<T> {
        layers::conv2d_forward(x, self.t(r.w), r.b.map(|b| self.t(b)), r.cout, r.k)
    }

    fn conv_bn(&mut self, r: &ConvBnRef, x: &Tensor<T>) -> ConvBnCache<T> {
        let z = self.conv(&r.conv, x);
        let (mut y, bn) = match self.mode {
            Mode::Train => {
                let (y, cache, stats) = layers::batchnorm_forward_train(&z, self.t(r.bn.gamma), self.t(r.bn.beta));
                self.updates.push(BnUpdate { mean: r.bn.mean, var: r.bn.var, stats });
                (y, Some(cache))
            }
            Mode::Eval => (
                layers::batchnorm_forward_eval(
                    &z,
                    self.t(r.bn.gamma),
                    self.t(r.bn.beta),
                    self.t(r.bn.mean),
                    self.t(r.bn.var),
                ),
                None,
            ),
        };
        if r.relu {
            layers::relu_inplace(&mut y);
        }
        ConvBnCache { x: x.clone(), bn, y }
    }

    fn se_weights(&self, r: &SeRef) -> SeWeights<'a, T> {
        SeWeights {
            fc1_w: self.t(r.fc1_w),
            fc1_b: self.t(r.fc1_b),
            fc2_w: self.t(r.fc2_w),
            fc2_b: self.t(r.fc2_b),
            hidden: r.hidden,
        }
    }

    fn res_block(&mut self, r: &ResBlockRef, x: &Tensor<T>) -> ResCache<T> {
        let c1 = self.conv_bn(&r.c1, x);
        let c2 = self.conv_bn(&r.c2, &c1.y);
        let (gated, se) = layers::se_forward(&c2.y, &self.se_weights(&r.se));
        let sc = r.shortcut.as_ref().map(|s| self.conv_bn(s, x));
        let mut out = gated;
        out.add_assign(sc.as_ref().map_or(x, |c| &c.y));
        layers::relu_inplace(&mut out);
        ResCache { c1, c2, se, sc, out }
    }
}

struct Bwd<'a, T> {
    p: &'a [NamedTensor<T>],
    g: &'a mut Gradients<T>,
}

impl<'a, T: Real> Bwd<'a, T> {
    fn conv(&mut self, r: &ConvRef, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let weight = &self.p[r.w].data;
        if let Some(b) = r.b {
            let (dw, db) = two_mut(&mut self.g.tensors, r.w, b);
            layers::conv2d_backward(x, weight, r.cout, r.k, dy, dw, Some(db), need_dx)
        } else {
            layers::conv2d_backward(x, weight, r.cout, r.k, dy, &mut self.g.tensors[r.w], None, need_dx)
        }
    }

    fn conv_bn(&mut self, r: &ConvBnRef, c: &ConvBnCache<T>, mut dy: Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        if r.relu {
            layers::relu_backward_inplace(&mut dy, &c.y);
        }
        let bn = c.bn.as_ref().expect("backward requires a training-mode forward");
        let gamma = &self.p[r.bn.gamma].data;
        let (dg, db) = two_mut(&mut self.g.tensors, r.bn.gamma, r.bn.beta);
        let dz = layers::batchnorm_backward(&dy, bn, gamma, dg, db);
        self.conv(&r.conv, &c.x, &dz, need_dx)
    }

    fn se(&mut self, r: &SeRef, x: &Tensor<T>, dy: &Tensor<T>, cache: &SeCache<T>) -> Tensor<T> {
        let wts = SeWeights {
            fc1_w: &self.p[r.fc1_w].data,
            fc1_b: &self.p[r.fc1_b].data,
            fc2_w: &self.p[r.fc2_w].data,
            fc2_b: &self.p[r.fc2_b].data,
            hidden: r.hidden,
        };
        let [a, b, c, d] = four_mut(&mut self.g.tensors, [r.fc1_w, r.fc1_b, r.fc2_w, r.fc2_b]);
        layers::se_backward(x, dy, cache, &wts, SeGrads { fc1_w: a, fc1_b: b, fc2_w: c, fc2_b: d })
    }

    fn res_block(&mut self, r: &ResBlockRef, c: &ResCache<T>, mut dout: Tensor<T>) -> Tensor<T> {
        layers::relu_backward_inplace(&mut dout, &c.out);
        let dh2 = self.se(&r.se, &c.c2.y, &dout, &c.se);
        let dh1 = self.conv_bn(&r.c2, &c.c2, dh2, true).unwrap();
        let mut dx = self.conv_bn(&r.c1, &c.c1, dh1, true).unwrap();
        match (&r.shortcut, &c.sc) {
            (Some(sr), Some(sc)) => dx.add_assign(&self.conv_bn(sr, sc, dout, true).unwrap()),
            _ => dx.add_assign(&dout),
        }
        dx
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn four_mut<T>(v: &mut [T], idx: [usize; 4]) -> [&mut T; 4] {
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    let (a, rest) = v.split_at_mut(idx[1]);
    let (b, rest) = rest.split_at_mut(idx[2] - idx[1]);
    let (c, d) = rest.split_at_mut(idx[3] - idx[2]);
    [&mut a[idx[0]], &mut b[0], &mut c[0], &mut d[0]]
}

/// Checks the spatial divisibility rule for a given input.
pub fn check_input<T>(config: &ModelConfig, x: &Tensor<T>) -> Result<()> {
    let div = 1usize << config.depth;
    if x.c != config.in_channels {
        return Err(Error::Shape(format!("expected {} input channels, got {}", config.in_channels, x.c)));
    }
    if x.h == 0 || x.w == 0 || x.h % div != 0 || x.w % div != 0 {
        return Err(Error::Shape(format!(
            "input {}×{} not divisible by 2^depth = {div}",
            x.h, x.w
        )));
    }
    Ok(())
}

/// Runs the network on an `N×C×H×W` batch.
pub fn forward<T: Real>(params: &ModelParameters<T>, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
    let net = Network::new(&params.config)?;
    check_input(&params.config, x)?;
    let mut ctx = Ctx { p: &params.tensors, mode, updates: Vec::new() };
    let stem = ctx.conv_bn(&net.stem, x);
    let mut stage_caches: Vec<StageCache<T>> = Vec::with_capacity(net.stages.len());
    let mut stage_outs: Vec<Tensor<T>> = Vec::with_capacity(net.stages.len());
    for (s, blocks) in net.stages.iter().enumerate() {
        let (mut cur, pool_arg) = if s == 0 {
            (stem.y.clone(), None)
        } else {
            let prev = &stage_outs[s - 1];
            let (pooled, arg) = layers::maxpool2_forward(prev);
            (pooled, Some((arg, prev.h, prev.w)))
        };
        let mut caches = Vec::with_capacity(blocks.len());
        for b in blocks {
            let c = ctx.res_block(b, &cur);
            cur = c.out.clone();
            caches.push(c);
        }
        stage_outs.push(cur);
        stage_caches.push(StageCache { pool_arg, blocks: caches });
    }
    let depth = params.config.depth;
    let mut dec_caches: Vec<Option<DecCache<T>>> = (0..depth).map(|_| None).collect();
    let mut prev = stage_outs[depth].clone();
    for s in (0..depth).rev() {
        let d = &net.decoder[s];
        let up = layers::upsample2_forward(&prev);
        let cat = layers::concat_channels(&up, &stage_outs[s]);
        let c1 = ctx.conv_bn(&d.c1, &cat);
        let c2 = ctx.conv_bn(&d.c2, &c1.y);
        let (out, se) = layers::se_forward(&c2.y, &ctx.se_weights(&d.se));
        prev = out;
        dec_caches[s] = Some(DecCache { c1, c2, se });
    }
    let dec_out = prev;
    let (logits, head_cache) = match &net.head {
        HeadRef::Reconstruction { logits } => {
            let mut out = ctx.conv(logits, &dec_out);
            if params.config.input_skip {
                out.add_assign(&layers::split_channels(x, 1).0);
            }
            (out, HeadCache::Reconstruction)
        }
        HeadRef::Segmentation { block, logits } => {
            let mut hidden = ctx.conv(block, &dec_out);
            layers::relu_inplace(&mut hidden);
            (ctx.conv(logits, &hidden), HeadCache::Segmentation { hidden })
        }
    };
    let updates = std::mem::take(&mut ctx.updates);
    let cache = match mode {
        Mode::Train => Some(NetCache {
            stem,
            stages: stage_caches,
            decoder: dec_caches.into_iter().map(|c| c.unwrap()).collect(),
            head: head_cache,
        }),
        Mode::Eval => None,
    };
    Ok(ForwardPass {
        logits,
        features: FeatureMaps { stages: stage_outs, decoder_out: dec_out },
        bn_updates: updates,
        cache,
    })
}

/// Back-propagates `dlogits` through a training-mode forward pass.
pub fn backward<T: Real>(params: &ModelParameters<T>, pass: &ForwardPass<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
    let net = Network::new(&params.config)?;
    let cache = pass
        .cache
        .as_ref()
        .ok_or_else(|| Error::Contract("backward requires a training-mode forward pass".into()))?;
    if dlogits.dims() != pass.logits.dims() {
        return Err(Error::Shape("logit gradient shape mismatch".into()));
    }
    let mut grads = params.zero_grads();
    let mut bw = Bwd { p: &params.tensors, g: &mut grads };
    let dec_in = &pass.features.decoder_out;
    let mut ddec = match (&net.head, &cache.head) {
        (HeadRef::Reconstruction { logits }, HeadCache::Reconstruction) => bw.conv(logits, dec_in, dlogits, true).unwrap(),
        (HeadRef::Segmentation { block, logits }, HeadCache::Segmentation { hidden }) => {
            let mut dh = bw.conv(logits, hidden, dlogits, true).unwrap();
            layers::relu_backward_inplace(&mut dh, hidden);
            bw.conv(block, dec_in, &dh, true).unwrap()
        }
        _ => unreachable!("head cache matches head"),
    };
    let depth = params.config.depth;
    let stages = &pass.features.stages;
    let mut dstage: Vec<Option<Tensor<T>>> = (0..=depth).map(|_| None).collect();
    for s in 0..depth {
        let d = &net.decoder[s];
        let dc = &cache.decoder[s];
        let dh2 = bw.se(&d.se, &dc.c2.y, &ddec, &dc.se);
        let dh1 = bw.conv_bn(&d.c2, &dc.c2, dh2, true).unwrap();
        let dcat = bw.conv_bn(&d.c1, &dc.c1, dh1, true).unwrap();
        let (dup, dskip) = layers::split_channels(&dcat, d.c_up);
        dstage[s] = Some(dskip);
        ddec = layers::upsample2_backward(&dup);
    }
    dstage[depth] = Some(ddec);
    let mut carry: Option<Tensor<T>> = None;
    for s in (0..=depth).rev() {
        let mut dout = dstage[s].take().unwrap_or_else(|| stages[s].zeros_like());
        if let Some(c) = carry.take() {
            dout.add_assign(&c);
        }
        let sc = &cache.stages[s];
        for (b, bc) in net.stages[s].iter().zip(&sc.blocks).rev() {
            dout = bw.res_block(b, bc, dout);
        }
        match &sc.pool_arg {
            Some((arg, h, w)) => carry = Some(layers::maxpool2_backward(&dout, arg, *h, *w)),
            None => {
                bw.conv_bn(&net.stem, &cache.stem, dout, false);
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { base_width: 4, depth: 2, se_reduction: 2, ..ModelConfig::default() }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ModelConfig { base_width: 2, ..tiny() }.validate().is_err());
        assert!(ModelConfig { depth: 1, ..tiny() }.validate().is_err());
        assert!(ModelConfig { se_reduction: 3, ..tiny() }.validate().is_err());
        assert!(build_model(&ModelConfig { depth: 1, ..tiny() }, 0).is_err());
    }

    #[test]
    fn eval_forward_shapes_and_divisibility() {
        let cfg = tiny();
        let p = build_model(&cfg, 3).unwrap();
        let x = Tensor::<f32>::zeros(1, 1, 16, 16);
        let out = forward(&p, &x, Mode::Eval).unwrap();
        assert_eq!(out.logits.dims(), [1, 1, 16, 16]);
        assert_eq!(out.features.stages.len(), 3);
        assert_eq!(out.features.stages[2].dims(), [1, 16, 4, 4]);
        let bad = Tensor::<f32>::zeros(1, 1, 18, 16);
        assert!(matches!(forward(&p, &bad, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn provenance_set_once() {
        let mut p = build_model(&tiny(), 0).unwrap();
        p.set_provenance(Provenance::TerrainPretrained).unwrap();
        assert!(p.set_provenance(Provenance::ProxyPretrained).is_err());
        assert!(p.set_provenance(Provenance::TerrainPretrained).is_ok());
    }

    #[test]
    fn transfer_rejects_mismatched_body() {
        let a = tiny();
        let b = ModelConfig { base_width: 8, ..tiny() };
        assert!(check_transfer_compatible(&a, &b).is_err());
        assert!(check_transfer_compatible(&a, &a.with_head(Head::Segmentation)).is_ok());
    }

    fn conv_bn_count(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + 2 * cout
    }

    fn se_count(c: usize, r: usize) -> usize {
        let h = c / r;
        2 * c * h + h + c
    }

    fn closed_form_count(cfg: &ModelConfig) -> usize {
        let w = |l: usize| cfg.base_width << l;
        let r = cfg.se_reduction;
        let mut n = conv_bn_count(cfg.in_channels, w(0), 3);
        for s in 0..=cfg.depth {
            for b in 0..cfg.blocks_per_stage {
                let cin = if b == 0 && s > 0 { w(s - 1) } else { w(s) };
                n += conv_bn_count(cin, w(s), 3) + conv_bn_count(w(s), w(s), 3) + se_count(w(s), r);
                if cin != w(s) {
                    n += conv_bn_count(cin, w(s), 1);
                }
            }
        }
        for s in 0..cfg.depth {
            n += conv_bn_count(w(s + 1) + w(s), w(s), 3) + conv_bn_count(w(s), w(s), 3) + se_count(w(s), r);
        }
        n + match cfg.head {
            Head::Reconstruction => w(0) + 1,
            Head::Segmentation => 9 * w(0) * w(0) + w(0) + w(0) * cfg.num_classes + cfg.num_classes,
        }
    }

    #[test]
    fn param_count_matches_closed_form() {
        let configs = [
            ModelConfig::default(),
            tiny(),
            ModelConfig { base_width: 8, depth: 3, se_reduction: 4, blocks_per_stage: 2, head: Head::Segmentation, ..tiny() },
        ];
        for cfg in configs {
            assert_eq!(build_model(&cfg, 0).unwrap().param_count(), closed_form_count(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(build_model(&tiny(), 9).unwrap(), build_model(&tiny(), 9).unwrap());
        assert_ne!(build_model(&tiny(), 9).unwrap(), build_model(&tiny(), 10).unwrap());
    }

    #[test]
    fn head_swap_changes_only_head_shapes() {
        let a = build_model(&tiny(), 0).unwrap();
        let b = build_model(&tiny().with_head(Head::Segmentation), 0).unwrap();
        let body = |p: &ModelParameters<f32>| -> Vec<(String, Vec<usize>)> {
            p.tensors.iter().filter(|t| !t.is_head()).map(|t| (t.name.clone(), t.shape.clone())).collect()
        };
        assert_eq!(body(&a), body(&b));
        assert!(a.tensors.iter().filter(|t| t.is_head()).all(|t| b.get(&t.name).is_none()));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut p = build_model(&tiny().with_head(Head::Segmentation), 4).unwrap();
        p.zero_head();
        let x = Tensor::from_vec(1, 1, 16, 16, (0..256).map(|i| (i as f32 * 0.37).sin()).collect());
        assert!(forward(&p, &x, Mode::Eval).unwrap().logits.data.iter().all(|v| *v == 0.0));
        let mut r = build_model(&ModelConfig { input_skip: false, ..tiny() }, 4).unwrap();
        r.zero_head();
        assert!(forward(&r, &x, Mode::Eval).unwrap().logits.data.iter().all(|v| *v == 0.0));
        let mut s = build_model(&tiny(), 4).unwrap();
        s.zero_head();
        assert_eq!(forward(&s, &x, Mode::Eval).unwrap().logits, x);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let p = build_model(&tiny(), 2).unwrap();
        let x = Tensor::from_vec(2, 1, 16, 16, (0..512).map(|i| (i as f32 * 0.11).cos()).collect());
        assert_eq!(forward(&p, &x, Mode::Eval).unwrap().logits, forward(&p, &x, Mode::Eval).unwrap().logits);
    }

    #[test]
    fn transfer_copies_body_exactly() {
        let mut src = build_model(&tiny(), 5).unwrap();
        src.set_provenance(Provenance::TerrainPretrained).unwrap();
        let seg = transfer_weights(&src, Head::Segmentation, 77).unwrap();
        assert_eq!(seg.provenance(), Provenance::TerrainPretrained);
        assert!(seg.get("head.recon.weight").is_none());
        for t in src.tensors.iter().filter(|t| !t.is_head()) {
            assert_eq!(seg.get(&t.name).unwrap().data, t.data);
        }
        let back = transfer_weights(&seg, Head::Reconstruction, 78).unwrap();
        for t in src.tensors.iter().filter(|t| !t.is_head()) {
            assert_eq!(back.get(&t.name).unwrap().data, t.data);
        }
    }

    fn total_loss(p: &ModelParameters<f64>, x: &Tensor<f64>, y: &Tensor<f64>, ex: &crate::losses::PerceptualExtractor) -> f64 {
        let out = forward(p, x, Mode::Train).unwrap();
        crate::losses::reconstruction_loss(y, &out.logits, &crate::losses::LossWeights::default(), ex).unwrap().value
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::Rng;
        let cfg = ModelConfig { input_skip: false, ..tiny() };
        let mut p = build_model(&cfg, 11).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for t in p.tensors.iter_mut().filter(|t| t.role == Role::Bias) {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
        let x = Tensor::from_vec(2, 1, 16, 16, (0..512).map(|_| rng.gen_range(0.0..1.0)).collect());
        let y = Tensor::from_vec(2, 1, 16, 16, (0..512).map(|_| rng.gen_range(0.0..1.0)).collect());
        let ex = crate::losses::PerceptualExtractor::new(&[8, 16, 32, 64], 1234);
        let pass = forward(&p, &x, Mode::Train).unwrap();
        let lg = crate::losses::reconstruction_loss(&y, &pass.logits, &crate::losses::LossWeights::default(), &ex).unwrap();
        let dl = Tensor::from_vec(2, 1, 16, 16, lg.grad);
        let grads = backward(&p, &pass, &dl).unwrap();
        let trainable: Vec<usize> = (0..p.tensors.len()).filter(|&i| p.tensors[i].role.trainable()).collect();
        let h = 1e-5;
        let mut checked = 0;
        while checked < 25 {
            let ti = trainable[rng.gen_range(0..trainable.len())];
            let k = rng.gen_range(0..p.tensors[ti].data.len());
            let orig = p.tensors[ti].data[k];
            p.tensors[ti].data[k] = orig + h;
            let up = total_loss(&p, &x, &y, &ex);
            p.tensors[ti].data[k] = orig - h;
            let dn = total_loss(&p, &x, &y, &ex);
            p.tensors[ti].data[k] = orig;
            let numeric = (up - dn) / (2.0 * h);
            let analytic = grads.tensors[ti][k];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
            assert!(rel < 1e-3, "{} [{k}]: analytic {analytic} numeric {numeric}", p.tensors[ti].name);
            checked += 1;
        }
    }
}
