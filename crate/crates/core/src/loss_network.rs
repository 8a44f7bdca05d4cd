//! Fixed feature extractor and the perceptual losses computed on its
//! activations: content, texture, stylization and hierarchical losses.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::codec::{RawTensor, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"MTWT";
pub const WEIGHTS_VERSION: u32 = 1;

/// Mean pixel of the ImageNet-trained VGG family, RGB, on the 0..255 scale.
pub const VGG_MEAN_RGB: [f32; 3] = [123.68, 116.779, 103.939];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelOrder {
    Rgb = 0,
    Bgr = 1,
}

impl ChannelOrder {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ChannelOrder::Rgb),
            1 => Ok(ChannelOrder::Bgr),
            other => Err(Error::Malformed {
                what: "weights container",
                detail: format!("unknown channel-order code {other}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Max,
    Average,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv { in_channels: usize, out_channels: usize, kernel: usize },
    Relu,
    Pool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
}

/// Ordered sequential conv/relu/pool topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossNetworkSpec {
    layers: Vec<LayerDef>,
}

impl LossNetworkSpec {
    pub fn new(layers: Vec<LayerDef>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Config(format!("duplicate loss-network layer name {:?}", l.name)));
            }
        }
        Ok(LossNetworkSpec { layers })
    }

    fn from_blocks(blocks: &[(usize, usize)], in_channels: usize) -> Self {
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        for (b, &(convs, width)) in blocks.iter().enumerate() {
            if b > 0 {
                layers.push(LayerDef { name: format!("pool{b}"), kind: LayerKind::Pool });
            }
            for i in 1..=convs {
                let kind = LayerKind::Conv { in_channels: c_in, out_channels: width, kernel: 3 };
                layers.push(LayerDef { name: format!("conv{}_{i}", b + 1), kind });
                layers.push(LayerDef { name: format!("relu{}_{i}", b + 1), kind: LayerKind::Relu });
                c_in = width;
            }
        }
        LossNetworkSpec { layers }
    }

    /// The sixteen convolution layers of VGG-19 (classifier and final pool
    /// dropped).
    pub fn vgg19() -> Self {
        Self::from_blocks(&[(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)], 3)
    }

    /// A small stand-in with the same layer names the default loss
    /// configuration touches (`relu1_1`, `relu2_1`, `relu3_1`, `relu4_1`,
    /// `relu4_2`), two pooling stages, and narrow widths.
    pub fn tiny() -> Self {
        let conv = |name: &str, i, o| LayerDef {
            name: name.into(),
            kind: LayerKind::Conv { in_channels: i, out_channels: o, kernel: 3 },
        };
        let relu = |name: &str| LayerDef { name: name.into(), kind: LayerKind::Relu };
        let pool = |name: &str| LayerDef { name: name.into(), kind: LayerKind::Pool };
        LossNetworkSpec {
            layers: vec![
                conv("conv1_1", 3, 8),
                relu("relu1_1"),
                pool("pool1"),
                conv("conv2_1", 8, 16),
                relu("relu2_1"),
                pool("pool2"),
                conv("conv3_1", 16, 16),
                relu("relu3_1"),
                conv("conv4_1", 16, 16),
                relu("relu4_1"),
                conv("conv4_2", 16, 16),
                relu("relu4_2"),
            ],
        }
    }

    pub fn layers(&self) -> &[LayerDef] {
        &self.layers
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.layers.iter().position(|l| l.name == name).ok_or_else(|| Error::UnknownLayer(name.into()))
    }

    /// Drops every layer after `deepest`.
    pub fn truncated(&self, deepest: &str) -> Result<Self> {
        let end = self.position(deepest)?;
        Ok(LossNetworkSpec { layers: self.layers[..=end].to_vec() })
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (&str, usize, usize, usize)> {
        self.layers.iter().filter_map(|l| match l.kind {
            LayerKind::Conv { in_channels, out_channels, kernel } => {
                Some((l.name.as_str(), in_channels, out_channels, kernel))
            }
            _ => None,
        })
    }

    /// Channel count and spatial divisor at the output of `layer`.
    pub fn layer_geometry(&self, layer: &str) -> Result<(usize, usize)> {
        let end = self.position(layer)?;
        let (mut c, mut div) = (3, 1);
        for l in &self.layers[..=end] {
            match l.kind {
                LayerKind::Conv { out_channels, .. } => c = out_channels,
                LayerKind::Pool => div *= 2,
                LayerKind::Relu => {}
            }
        }
        Ok((c, div))
    }
}

/// On-disk loss-network weights (`MTWT`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsContainer {
    pub channel_order: ChannelOrder,
    /// Mean pixel in the network's input channel order, 0..255 scale.
    pub mean: [f32; 3],
    pub tensors: Vec<RawTensor>,
}

impl WeightsContainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&WEIGHTS_MAGIC);
        w.u32(WEIGHTS_VERSION);
        w.u8(self.channel_order as u8);
        for &m in &self.mean {
            w.f32(m);
        }
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.tensor(t);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "weights container");
        r.magic(WEIGHTS_MAGIC)?;
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Version { what: "weights container", expected: WEIGHTS_VERSION, found: version });
        }
        let channel_order = ChannelOrder::from_code(r.u8()?)?;
        let mean = [r.f32()?, r.f32()?, r.f32()?];
        let count = r.u32()?;
        let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(WeightsContainer { channel_order, mean, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Seeded He-uniform weights for `spec`; the first convolution is scaled
    /// down to the 0..255 input range.
    pub fn random(spec: &LossNetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for (i, (name, cin, cout, k)) in spec.conv_layers().enumerate() {
            let fan_in = (cin * k * k) as f32;
            let mut bound = (6.0 / fan_in).sqrt();
            if i == 0 {
                bound /= 64.0;
            }
            let w = (0..cout * cin * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
            let b = (0..cout).map(|_| rng.gen_range(-0.05..0.05)).collect();
            tensors.push(RawTensor {
                name: format!("{name}.weight"),
                dims: vec![cout as u32, cin as u32, k as u32, k as u32],
                data: w,
            });
            tensors.push(RawTensor { name: format!("{name}.bias"), dims: vec![cout as u32], data: b });
        }
        WeightsContainer { channel_order: ChannelOrder::Rgb, mean: VGG_MEAN_RGB, tensors }
    }
}

/// Seed of the built-in tiny loss network.
pub const TINY_LOSS_SEED: u64 = 0x5EED_7157;

/// Feature extractor with constant weights bound to a [`LossNetworkSpec`].
#[derive(Clone)]
pub struct LossNetwork<T: Scalar> {
    spec: LossNetworkSpec,
    channel_order: ChannelOrder,
    mean: [T; 3],
    convs: HashMap<String, (Arc<Tensor<T>>, Arc<Tensor<T>>)>,
    pooling: Pooling,
}

impl<T: Scalar> LossNetwork<T> {
    pub fn from_container(spec: LossNetworkSpec, container: &WeightsContainer) -> Result<Self> {
        let mut convs = HashMap::new();
        for (name, cin, cout, k) in spec.conv_layers() {
            let fetch = |suffix: &str, expected: Vec<usize>| -> Result<Arc<Tensor<T>>> {
                let key = format!("{name}.{suffix}");
                let raw = container.get(&key).ok_or_else(|| Error::MissingWeight(key.clone()))?;
                if raw.dims_usize() != expected {
                    return Err(Error::DimensionMismatch { name: key, expected, found: raw.dims_usize() });
                }
                Ok(Arc::new(raw.to_tensor()?))
            };
            let w = fetch("weight", vec![cout, cin, k, k])?;
            let b = fetch("bias", vec![cout])?;
            convs.insert(name.to_string(), (w, b));
        }
        Ok(LossNetwork {
            spec,
            channel_order: container.channel_order,
            mean: container.mean.map(T::from_f32),
            convs,
            pooling: Pooling::Max,
        })
    }

    /// Reads an `MTWT` file and binds it to `spec`.
    pub fn load_weights(path: impl AsRef<Path>, spec: LossNetworkSpec) -> Result<Self> {
        Self::from_container(spec, &WeightsContainer::load(path)?)
    }

    pub fn tiny() -> Self {
        let spec = LossNetworkSpec::tiny();
        let container = WeightsContainer::random(&spec, TINY_LOSS_SEED);
        Self::from_container(spec, &container).expect("tiny loss network is self-consistent")
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn spec(&self) -> &LossNetworkSpec {
        &self.spec
    }

    pub fn cast<U: Scalar>(&self) -> LossNetwork<U> {
        LossNetwork {
            spec: self.spec.clone(),
            channel_order: self.channel_order,
            mean: self.mean.map(|m| U::from_f64(m.as_f64())),
            convs: self
                .convs
                .iter()
                .map(|(k, (w, b))| (k.clone(), (Arc::new(w.cast()), Arc::new(b.cast()))))
                .collect(),
            pooling: self.pooling,
        }
    }

    /// `[0,1]` RGB → 0..255, reordered to the network's channel order, mean
    /// subtracted.
    pub fn preprocess(&self, image: &Var<T>) -> Result<Var<T>> {
        if image.shape().c != 3 {
            return Err(Error::shape(format!("loss network expects 3 channels, got {}", image.shape())));
        }
        let s = T::from_f64(255.0);
        let z = T::zero();
        let matrix = match self.channel_order {
            ChannelOrder::Rgb => [s, z, z, z, s, z, z, z, s],
            ChannelOrder::Bgr => [z, z, s, z, s, z, s, z, z],
        };
        let offsets = self.mean.map(|m| -m);
        image.channel_mix(&matrix, &offsets)
    }

    /// Activations at exactly the requested layers for a `[0,1]` RGB image.
    pub fn extract_features(&self, image: &Var<T>, layers: &[&str]) -> Result<FeatureBundle<T>> {
        let mut wanted = HashSet::new();
        let mut deepest = None;
        for &l in layers {
            let pos = self.spec.position(l)?;
            wanted.insert(l);
            deepest = deepest.max(Some(pos));
        }
        let mut bundle = FeatureBundle::default();
        let Some(deepest) = deepest else { return Ok(bundle) };
        let mut x = self.preprocess(image)?;
        for layer in &self.spec.layers[..=deepest] {
            x = match layer.kind {
                LayerKind::Conv { .. } => {
                    let (w, b) = &self.convs[&layer.name];
                    let w = Var::constant_shared(Arc::clone(w));
                    let b = Var::constant_shared(Arc::clone(b));
                    x.conv2d(&w, Some(&b), 1)?
                }
                LayerKind::Relu => x.relu(),
                LayerKind::Pool => match self.pooling {
                    Pooling::Max => x.max_pool2(),
                    Pooling::Average => x.avg_pool2(),
                },
            };
            if wanted.contains(layer.name.as_str()) {
                bundle.features.insert(layer.name.clone(), x.clone());
            }
        }
        Ok(bundle)
    }
}

/// Layer name → activations of one image.
#[derive(Debug)]
pub struct FeatureBundle<T: Scalar> {
    pub features: BTreeMap<String, Var<T>>,
}

impl<T: Scalar> Default for FeatureBundle<T> {
    fn default() -> Self {
        FeatureBundle { features: BTreeMap::new() }
    }
}

impl<T: Scalar> FeatureBundle<T> {
    pub fn get(&self, layer: &str) -> Result<&Var<T>> {
        self.features.get(layer).ok_or_else(|| Error::UnknownLayer(layer.into()))
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Which loss-network layers feed the content and texture terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossLayers {
    pub content: String,
    pub texture: Vec<String>,
}

impl Default for LossLayers {
    fn default() -> Self {
        LossLayers {
            content: "relu4_2".into(),
            texture: ["relu1_1", "relu2_1", "relu3_1", "relu4_1"].map(String::from).to_vec(),
        }
    }
}

impl LossLayers {
    pub fn validate(&self, spec: &LossNetworkSpec) -> Result<()> {
        spec.position(&self.content)?;
        for t in &self.texture {
            spec.position(t)?;
        }
        Ok(())
    }

    fn texture_refs(&self) -> Vec<&str> {
        self.texture.iter().map(String::as_str).collect()
    }

    fn all_refs(&self) -> Vec<&str> {
        let mut v = self.texture_refs();
        if !v.contains(&self.content.as_str()) {
            v.push(&self.content);
        }
        v
    }
}

/// `α`, `β` and the per-level weights `λ_1..λ_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambdas: Vec<f64>,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, lambdas: Vec<f64>) -> Result<Self> {
        let w = LossWeights { alpha, beta, lambdas };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta].into_iter().chain(self.lambdas.iter().copied());
        if all.clone().any(|v| !v.is_finite() || v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        if !self.lambdas.iter().any(|&l| l > 0.0) {
            return Err(Error::Config("at least one level weight must be positive".into()));
        }
        Ok(())
    }
}

/// Gram matrix divided by the feature element count `c·h·w` (per sample).
pub fn normalized_gram<T: Scalar>(features: &Var<T>) -> Var<T> {
    let s = features.shape();
    features.gram().scalar_mul(T::one() / T::from_usize(s.c * s.plane()))
}

/// Mean squared feature difference at `layer`; the target is detached.
pub fn content_loss<T: Scalar>(
    generated: &FeatureBundle<T>,
    target: &FeatureBundle<T>,
    layer: &str,
) -> Result<Var<T>> {
    generated.get(layer)?.mse(&target.get(layer)?.detach())
}

/// Layer name → normalized target Gram, shape `(1, 1, c, c)`.
pub type GramTargets<T> = BTreeMap<String, Arc<Tensor<T>>>;

/// `Σ_l ‖Ĝ_l(gen) − Ĝ_l(style)‖² / c_l²` over every layer in `targets`, with
/// `Ĝ` the normalized Gram.
pub fn texture_loss<T: Scalar>(generated: &FeatureBundle<T>, targets: &GramTargets<T>) -> Result<Var<T>> {
    let mut total: Option<Var<T>> = None;
    for (layer, target) in targets {
        let g = normalized_gram(generated.get(layer)?);
        let n = g.shape().n;
        let t = if n == 1 {
            Var::constant_shared(Arc::clone(target))
        } else {
            let data = target.data().repeat(n);
            Var::constant(Tensor::from_vec(Shape { n, ..target.shape() }, data)?)
        };
        let term = g.mse(&t)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.unwrap_or_else(|| Var::constant(Tensor::scalar(T::zero()))))
}

/// The three parts of one level's stylization loss.
#[derive(Debug, Clone)]
pub struct StylizationTerms<T: Scalar> {
    pub content: Var<T>,
    pub texture: Var<T>,
    /// `α·content + β·texture`.
    pub total: Var<T>,
}

pub fn combine_stylization<T: Scalar>(content: Var<T>, texture: Var<T>, alpha: f64, beta: f64) -> Result<StylizationTerms<T>> {
    let total = content.scalar_mul(T::from_f64(alpha)).add(&texture.scalar_mul(T::from_f64(beta)))?;
    Ok(StylizationTerms { content, texture, total })
}

/// `α·L_content(gen, content_target) + β·L_texture(gen, style)`.
pub fn stylization_loss<T: Scalar>(
    net: &LossNetwork<T>,
    generated: &Var<T>,
    content_target: &Var<T>,
    style: &GramTargets<T>,
    layers: &LossLayers,
    alpha: f64,
    beta: f64,
) -> Result<StylizationTerms<T>> {
    let gen = net.extract_features(generated, &layers.all_refs())?;
    let target = net.extract_features(&content_target.detach(), &[&layers.content])?;
    let content = content_loss(&gen, &target, &layers.content)?;
    let texture = texture_loss(&gen, style)?;
    combine_stylization(content, texture, alpha, beta)
}

/// Per-level Gram targets for a hierarchy of outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTargets<T: Scalar> {
    pub levels: Vec<LevelStyle<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelStyle<T: Scalar> {
    /// Shorter side of the style image as rendered for this level.
    pub scale: usize,
    /// Index of the style image used.
    pub style_index: usize,
    pub grams: GramTargets<T>,
}

/// Size `(h, w)` with the shorter side equal to `scale`, aspect preserved.
pub fn scaled_extent(h: usize, w: usize, scale: usize) -> (usize, usize) {
    if h <= w {
        (scale, ((w as f64 * scale as f64 / h as f64).round() as usize).max(1))
    } else {
        (((h as f64 * scale as f64 / w as f64).round() as usize).max(1), scale)
    }
}

/// Normalized Grams of one style image rendered at `scale`.
pub fn style_grams<T: Scalar>(
    net: &LossNetwork<T>,
    style: &Tensor<T>,
    scale: usize,
    layers: &[String],
) -> Result<GramTargets<T>> {
    let s = style.shape();
    let (h, w) = scaled_extent(s.h, s.w, scale);
    let img = Var::constant(style.clone()).bilinear_resize(h, w)?;
    let refs: Vec<&str> = layers.iter().map(String::as_str).collect();
    let bundle = net.extract_features(&img, &refs)?;
    let mut out = BTreeMap::new();
    for (name, f) in &bundle.features {
        let g = normalized_gram(f);
        out.insert(name.clone(), g.shared_value());
    }
    Ok(out)
}

/// Grams for each level; `assignment[k]` picks the style image of level `k`.
pub fn precompute_style_targets<T: Scalar>(
    net: &LossNetwork<T>,
    styles: &[Tensor<T>],
    assignment: &[usize],
    scales: &[usize],
    layers: &[String],
) -> Result<StyleTargets<T>> {
    if styles.is_empty() {
        return Err(Error::Config("at least one style image is required".into()));
    }
    if assignment.len() != scales.len() {
        return Err(Error::Config(format!(
            "{} style assignments for {} levels",
            assignment.len(),
            scales.len()
        )));
    }
    let mut levels = Vec::with_capacity(scales.len());
    for (k, (&idx, &scale)) in assignment.iter().zip(scales).enumerate() {
        let style = styles.get(idx).ok_or_else(|| {
            Error::Config(format!("level {} has no style image (index {idx}, {} given)", k + 1, styles.len()))
        })?;
        if scale == 0 {
            return Err(Error::Config(format!("style scale of level {} must be positive", k + 1)));
        }
        levels.push(LevelStyle { scale, style_index: idx, grams: style_grams(net, style, scale, layers)? });
    }
    Ok(StyleTargets { levels })
}

/// Per-level terms plus `Σ_k λ_k·L_S^k` as one differentiable graph.
pub struct HierarchicalLoss<T: Scalar> {
    pub total: Var<T>,
    pub levels: Vec<StylizationTerms<T>>,
}

impl<T: Scalar> HierarchicalLoss<T> {
    pub fn level_values(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.total.value().item().as_f64()).collect()
    }
}

pub fn hierarchical_loss<T: Scalar>(
    net: &LossNetwork<T>,
    outputs: &[Var<T>],
    content_targets: &[Var<T>],
    style: &StyleTargets<T>,
    weights: &LossWeights,
    layers: &LossLayers,
) -> Result<HierarchicalLoss<T>> {
    let k = outputs.len();
    if content_targets.len() != k || style.levels.len() != k || weights.lambdas.len() != k {
        return Err(Error::Config(format!(
            "arity mismatch: {k} outputs, {} content targets, {} style levels, {} level weights",
            content_targets.len(),
            style.levels.len(),
            weights.lambdas.len()
        )));
    }
    let mut total: Option<Var<T>> = None;
    let mut levels = Vec::with_capacity(k);
    for i in 0..k {
        let terms = stylization_loss(
            net,
            &outputs[i],
            &content_targets[i],
            &style.levels[i].grams,
            layers,
            weights.alpha,
            weights.beta,
        )?;
        let weighted = terms.total.scalar_mul(T::from_f64(weights.lambdas[i]));
        total = Some(match total {
            None => weighted,
            Some(acc) => acc.add(&weighted)?,
        });
        levels.push(terms);
    }
    let total = total.ok_or_else(|| Error::Config("hierarchical loss needs at least one level".into()))?;
    Ok(HierarchicalLoss { total, levels })
}
