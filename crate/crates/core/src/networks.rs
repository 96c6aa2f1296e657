//! Encoders, the source classifier and the dual-head discriminator.
//!
//! Each network is a plain [`ParameterSet`]; the forward functions record
//! into a caller-owned [`Graph`] so that the same code serves training,
//! evaluation and gradient checks.

use std::collections::BTreeMap;
use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{GradientMap, Graph, NodeId, Padding, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchitectureKind {
    ConvImage,
    MlpVector,
}

/// How rank-4 encoder features reach the classifier's dense layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureHandoff {
    Flatten,
    GlobalPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkRole {
    Encoder,
    Classifier,
    Discriminator,
}

impl NetworkRole {
    fn prefix(self) -> &'static str {
        match self {
            NetworkRole::Encoder => "enc",
            NetworkRole::Classifier => "cls",
            NetworkRole::Discriminator => "disc",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitecturePreset {
    pub kind: ArchitectureKind,
    /// Per-sample input dims: `[h, w, c]` for images, `[d]` for vectors.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub encoder_widths: Vec<usize>,
    pub disc_widths: Vec<usize>,
    pub classifier_hidden: usize,
    pub kernel_size: usize,
    pub leaky_alpha: f64,
    pub handoff: FeatureHandoff,
}

/// A parameterized (or pooling) layer in a network's layer plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { name: String, in_ch: usize, out_ch: usize },
    ConvTranspose { name: String, in_ch: usize, out_ch: usize },
    Dense { name: String, inputs: usize, outputs: usize },
    GlobalAvgPool,
}

const STRIDE: usize = 2;

impl ArchitecturePreset {
    /// Four stride-2 conv layers of 32/64/128/256 filters, mirrored by the
    /// discriminator's transposed stack.
    pub fn conv_image(side: usize, channels: usize, num_classes: usize) -> Self {
        ArchitecturePreset {
            kind: ArchitectureKind::ConvImage,
            input_shape: vec![side, side, channels],
            num_classes,
            encoder_widths: vec![32, 64, 128, 256],
            disc_widths: vec![256, 128, 64, 32],
            classifier_hidden: 100,
            kernel_size: 4,
            leaky_alpha: 0.2,
            handoff: FeatureHandoff::Flatten,
        }
    }

    pub fn mlp_vector(dim: usize, num_classes: usize) -> Self {
        ArchitecturePreset {
            kind: ArchitectureKind::MlpVector,
            input_shape: vec![dim],
            num_classes,
            encoder_widths: vec![64, 64],
            disc_widths: vec![64, 64],
            classifier_hidden: 100,
            kernel_size: 4,
            leaky_alpha: 0.2,
            handoff: FeatureHandoff::Flatten,
        }
    }

    /// Replaces the encoder widths and mirrors them into the discriminator.
    pub fn with_encoder_widths(mut self, widths: &[usize]) -> Self {
        self.encoder_widths = widths.to_vec();
        if self.kind == ArchitectureKind::ConvImage {
            self.disc_widths = widths.iter().rev().copied().collect();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(format!("malformed preset: {m}")));
        if self.num_classes < 2 {
            return bad(format!("num_classes = {} (need ≥ 2)", self.num_classes));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad(format!("encoder widths {:?}", self.encoder_widths));
        }
        if self.disc_widths.contains(&0) || self.classifier_hidden == 0 {
            return bad("zero-width layer".into());
        }
        if !(self.leaky_alpha >= 0.0 && self.leaky_alpha < 1.0) {
            return bad(format!("leaky_alpha = {}", self.leaky_alpha));
        }
        match self.kind {
            ArchitectureKind::ConvImage => {
                let &[h, w, c] = self.input_shape.as_slice() else {
                    return bad(format!("image input shape {:?} is not h×w×c", self.input_shape));
                };
                let div = STRIDE.pow(self.encoder_widths.len() as u32);
                if h == 0 || w == 0 || c == 0 || h % div != 0 || w % div != 0 {
                    return bad(format!(
                        "input {h}×{w} not divisible by {div} for {} stride-2 layers",
                        self.encoder_widths.len()
                    ));
                }
                if self.kernel_size == 0 {
                    return bad("kernel_size = 0".into());
                }
                if self.disc_widths.is_empty() {
                    return bad("discriminator needs at least one transposed layer".into());
                }
            }
            ArchitectureKind::MlpVector => {
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return bad(format!("vector input shape {:?}", self.input_shape));
                }
            }
        }
        Ok(())
    }

    /// Per-sample encoder output dims.
    pub fn feature_shape(&self) -> Vec<usize> {
        let last = *self.encoder_widths.last().expect("validated");
        match self.kind {
            ArchitectureKind::ConvImage => {
                let div = STRIDE.pow(self.encoder_widths.len() as u32);
                vec![self.input_shape[0] / div, self.input_shape[1] / div, last]
            }
            ArchitectureKind::MlpVector => vec![last],
        }
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape().iter().product()
    }

    fn classifier_input_len(&self) -> usize {
        match (self.kind, self.handoff) {
            (ArchitectureKind::ConvImage, FeatureHandoff::GlobalPool) => *self.encoder_widths.last().unwrap(),
            _ => self.feature_len(),
        }
    }

    /// Layers of a network in forward order.
    pub fn layer_plan(&self, role: NetworkRole) -> Vec<Layer> {
        let mut plan = Vec::new();
        match (role, self.kind) {
            (NetworkRole::Encoder, ArchitectureKind::ConvImage) => {
                let mut cin = self.input_shape[2];
                for (i, &w) in self.encoder_widths.iter().enumerate() {
                    plan.push(Layer::Conv {
                        name: format!("enc.conv{}", i + 1),
                        in_ch: cin,
                        out_ch: w,
                    });
                    cin = w;
                }
            }
            (NetworkRole::Encoder, ArchitectureKind::MlpVector) => {
                let mut fan = self.input_shape[0];
                for (i, &w) in self.encoder_widths.iter().enumerate() {
                    plan.push(Layer::Dense {
                        name: format!("enc.fc{}", i + 1),
                        inputs: fan,
                        outputs: w,
                    });
                    fan = w;
                }
            }
            (NetworkRole::Classifier, _) => {
                plan.push(Layer::Dense {
                    name: "cls.fc1".into(),
                    inputs: self.classifier_input_len(),
                    outputs: self.classifier_hidden,
                });
                plan.push(Layer::Dense {
                    name: "cls.fc2".into(),
                    inputs: self.classifier_hidden,
                    outputs: self.num_classes,
                });
            }
            (NetworkRole::Discriminator, ArchitectureKind::ConvImage) => {
                let mut cin = *self.encoder_widths.last().unwrap();
                for (i, &w) in self.disc_widths.iter().enumerate() {
                    plan.push(Layer::ConvTranspose {
                        name: format!("disc.tconv{}", i + 1),
                        in_ch: cin,
                        out_ch: w,
                    });
                    cin = w;
                }
                plan.push(Layer::GlobalAvgPool);
                plan.push(Layer::Dense {
                    name: "disc.head".into(),
                    inputs: cin,
                    outputs: self.num_classes,
                });
            }
            (NetworkRole::Discriminator, ArchitectureKind::MlpVector) => {
                let mut fan = *self.encoder_widths.last().unwrap();
                for (i, &w) in self.disc_widths.iter().enumerate() {
                    plan.push(Layer::Dense {
                        name: format!("disc.fc{}", i + 1),
                        inputs: fan,
                        outputs: w,
                    });
                    fan = w;
                }
                plan.push(Layer::Dense {
                    name: "disc.head".into(),
                    inputs: fan,
                    outputs: self.num_classes,
                });
            }
        }
        plan
    }
}

/// Named trainable tensors of one network, iterated in sorted name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Mutable access to the values of one parameter; the shape is fixed.
    pub fn values_mut(&mut self, name: &str) -> Result<&mut [T]> {
        self.params
            .get_mut(name)
            .map(Tensor::data_mut)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    /// SHA-256 over names, dims and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.dims() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Records every parameter as a graph leaf. Trainable leaves are
    /// variables; frozen ones are constants and never receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|(name, t)| {
                let id = if trainable {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), id)
            })
            .collect();
        Bound { ids }
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Deep copy; later updates to the copy never reach the source.
pub fn clone_params<T: Real>(src: &ParameterSet<T>) -> ParameterSet<T> {
    src.clone()
}

/// Parameter name → graph node for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    /// Binds names to nodes already present in a graph.
    pub fn from_ids(ids: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Bound {
            ids: ids.into_iter().collect(),
        }
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {name} not bound")))
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.ids.values().copied().collect()
    }

    /// Re-keys a gradient map by parameter name.
    pub fn named<T: Real>(&self, grads: &GradientMap<T>) -> Result<NamedGradients<T>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.ids {
            let g = grads
                .get(id)
                .ok_or_else(|| Error::contract(format!("no gradient recorded for {name}")))?;
            out.insert(name.clone(), g.clone());
        }
        Ok(NamedGradients(out))
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NamedGradients<T>(pub BTreeMap<String, Tensor<T>>);

impl<T: Real> NamedGradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.0 {
            if !t.is_finite() {
                return Err(Error::numeric("gradient", format!("non-finite gradient for {name}")));
            }
        }
        Ok(())
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed
    let mut h = fnv::FnvHasher::default();
    h.write(name.as_bytes());
    h.finish() ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn he_normal<T: Real>(dims: Vec<usize>, fan_in: f64, seed: u64, name: &str) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let std = (2.0 / fan_in).sqrt();
    Tensor::from_fn(dims, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::lit(z * std)
    })
}

/// He-scaled normal weights (σ = √(2/fan_in)) and zero biases.
///
/// Each tensor draws from its own stream keyed by (seed, name), so the
/// result does not depend on construction order. For transposed
/// convolutions the fan-in is the number of taps that reach one output,
/// `k²·c_in / stride²`.
pub fn init_params<T: Real>(preset: &ArchitecturePreset, role: NetworkRole, seed: u64) -> Result<ParameterSet<T>> {
    preset.validate()?;
    let k = preset.kernel_size;
    let mut set = ParameterSet::new();
    for layer in preset.layer_plan(role) {
        match layer {
            Layer::Conv { name, in_ch, out_ch } => {
                let kname = format!("{name}.kernel");
                let kern = he_normal(vec![k, k, in_ch, out_ch], (k * k * in_ch) as f64, seed, &kname)?;
                set.insert(kname, kern)?;
                set.insert(format!("{name}.bias"), Tensor::zeros(vec![out_ch])?)?;
            }
            Layer::ConvTranspose { name, in_ch, out_ch } => {
                let kname = format!("{name}.kernel");
                let fan = ((k * k * in_ch) as f64 / (STRIDE * STRIDE) as f64).max(1.0);
                set.insert(kname.clone(), he_normal(vec![k, k, out_ch, in_ch], fan, seed, &kname)?)?;
                set.insert(format!("{name}.bias"), Tensor::zeros(vec![out_ch])?)?;
            }
            Layer::Dense { name, inputs, outputs } => {
                let wname = format!("{name}.weight");
                set.insert(wname.clone(), he_normal(vec![inputs, outputs], inputs as f64, seed, &wname)?)?;
                set.insert(format!("{name}.bias"), Tensor::zeros(vec![outputs])?)?;
            }
            Layer::GlobalAvgPool => {}
        }
    }
    debug_assert!(set.names().all(|n| n.starts_with(role.prefix())));
    Ok(set)
}

fn dense<T: Real>(g: &mut Graph<T>, p: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, p.id(&format!("{name}.weight"))?)?;
    g.add(y, p.id(&format!("{name}.bias"))?)
}

fn check_batch<T: Real>(g: &Graph<T>, x: NodeId, per_sample: &[usize], what: &str) -> Result<usize> {
    let dims = g.shape(x).dims();
    if dims.len() != per_sample.len() + 1 || &dims[1..] != per_sample {
        return Err(Error::contract(format!(
            "{what}: expected batch×{per_sample:?}, got {}",
            g.shape(x)
        )));
    }
    Ok(dims[0])
}

/// `M_s` / `M_t`: stride-2 convolutions with ReLU (or dense+ReLU for vectors).
pub fn encoder<T: Real>(g: &mut Graph<T>, preset: &ArchitecturePreset, p: &Bound, x: NodeId) -> Result<NodeId> {
    check_batch(g, x, &preset.input_shape, "encoder")?;
    let mut h = x;
    for layer in preset.layer_plan(NetworkRole::Encoder) {
        h = match layer {
            Layer::Conv { name, .. } => {
                let c = g.conv2d(h, p.id(&format!("{name}.kernel"))?, STRIDE, Padding::Same)?;
                g.add(c, p.id(&format!("{name}.bias"))?)?
            }
            Layer::Dense { name, .. } => dense(g, p, &name, h)?,
            other => unreachable!("encoder plan contains {other:?}"),
        };
        h = g.relu(h)?;
    }
    Ok(h)
}

/// `C_s` before the softmax.
pub fn classifier_logits<T: Real>(
    g: &mut Graph<T>,
    preset: &ArchitecturePreset,
    p: &Bound,
    features: NodeId,
) -> Result<NodeId> {
    check_batch(g, features, &preset.feature_shape(), "classifier")?;
    let x = match (preset.kind, preset.handoff) {
        (ArchitectureKind::ConvImage, FeatureHandoff::GlobalPool) => g.global_avg_pool(features)?,
        (ArchitectureKind::ConvImage, FeatureHandoff::Flatten) => g.flatten(features)?,
        (ArchitectureKind::MlpVector, _) => features,
    };
    let h = dense(g, p, "cls.fc1", x)?;
    let h = g.relu(h)?;
    dense(g, p, "cls.fc2", h)
}

/// `C_s`: dense(hidden)+ReLU, dense(N)+softmax.
pub fn classifier<T: Real>(
    g: &mut Graph<T>,
    preset: &ArchitecturePreset,
    p: &Bound,
    features: NodeId,
) -> Result<NodeId> {
    let logits = classifier_logits(g, preset, p, features)?;
    g.softmax(logits, 1)
}

/// Pre-softmax discriminator outputs `l_1..l_N`, shared by both heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorLogits(pub NodeId);

/// Shared trunk of `D`: transposed convolutions with LeakyReLU, global
/// average pooling and one dense prediction layer.
pub fn discriminator_logits<T: Real>(
    g: &mut Graph<T>,
    preset: &ArchitecturePreset,
    p: &Bound,
    features: NodeId,
) -> Result<DiscriminatorLogits> {
    check_batch(g, features, &preset.feature_shape(), "discriminator")?;
    let mut h = features;
    let plan = preset.layer_plan(NetworkRole::Discriminator);
    let last = plan.len() - 1;
    for (i, layer) in plan.into_iter().enumerate() {
        h = match layer {
            Layer::ConvTranspose { name, .. } => {
                let c = g.conv2d_transpose(h, p.id(&format!("{name}.kernel"))?, STRIDE, Padding::Same)?;
                let c = g.add(c, p.id(&format!("{name}.bias"))?)?;
                g.leaky_relu(c, preset.leaky_alpha)?
            }
            Layer::GlobalAvgPool => g.global_avg_pool(h)?,
            Layer::Dense { name, .. } if i == last => dense(g, p, &name, h)?,
            Layer::Dense { name, .. } => {
                let d = dense(g, p, &name, h)?;
                g.leaky_relu(d, preset.leaky_alpha)?
            }
            Layer::Conv { .. } => unreachable!("discriminator has no forward convolutions"),
        };
    }
    Ok(DiscriminatorLogits(h))
}

/// `D_sup`: softmax over the shared logits.
pub fn discriminator_supervised<T: Real>(g: &mut Graph<T>, logits: DiscriminatorLogits) -> Result<NodeId> {
    g.softmax(logits.0, 1)
}

/// `D_unsup = Z/(Z+1)` with `Z = Σ exp(l_n)`, evaluated as
/// `sigmoid(logsumexp(l))`. Returns `batch × 1`.
pub fn discriminator_unsupervised<T: Real>(g: &mut Graph<T>, logits: DiscriminatorLogits) -> Result<NodeId> {
    let rows = g.shape(logits.0).dims()[0];
    let lse = g.logsumexp(logits.0, Some(1))?;
    let d = g.sigmoid(lse)?;
    g.reshape(d, vec![rows, 1])
}

fn run<T: Real>(
    params: &ParameterSet<T>,
    input: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, &Bound, NodeId) -> Result<NodeId>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let out = f(&mut g, &p, x)?;
    Ok(g.value(out).clone())
}

/// Encoder features for a batch, without recording gradients.
pub fn encoder_forward<T: Real>(
    preset: &ArchitecturePreset,
    params: &ParameterSet<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    run(params, batch, |g, p, x| encoder(g, preset, p, x))
}

pub fn classifier_forward<T: Real>(
    preset: &ArchitecturePreset,
    params: &ParameterSet<T>,
    features: &Tensor<T>,
) -> Result<Tensor<T>> {
    run(params, features, |g, p, x| classifier(g, preset, p, x))
}

pub fn discriminator_forward<T: Real>(
    preset: &ArchitecturePreset,
    params: &ParameterSet<T>,
    features: &Tensor<T>,
) -> Result<Tensor<T>> {
    run(params, features, |g, p, x| Ok(discriminator_logits(g, preset, p, x)?.0))
}

/// Applies `D_unsup` to raw logit rows.
pub fn unsupervised_score<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let d = discriminator_unsupervised(&mut g, DiscriminatorLogits(l))?;
    Ok(g.value(d).clone())
}
