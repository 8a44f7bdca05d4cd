//! The multimodal transfer network: style, enhance and refine subnets and the
//! scale plan that chains them.
//!
//! Output `k` depends only on the parameters of subnets `1..=k`; each subnet
//! consumes the previous output resized to its own scale.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::codec::RawTensor;
use crate::error::{Error, Result};
use crate::loss_network::scaled_extent;
use crate::tensor::{Scalar, Shape, Tensor};

/// BT.601 luma weights (R, G, B).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

const NORM_EPS: f64 = 1e-5;

/// `Y = 0.299R + 0.587G + 0.114B` per pixel.
pub fn extract_luminance<T: Scalar>(image: &Var<T>) -> Result<Var<T>> {
    if image.shape().c != 3 {
        return Err(Error::shape(format!("luminance needs an RGB image, got {}", image.shape())));
    }
    image.channel_mix(&LUMA_WEIGHTS.map(T::from_f64), &[T::zero()])
}

/// Channel widths of the three subnets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkWidths {
    /// Style-subnet RGB-Block convolutions; residuals run at the last width.
    pub rgb: [usize; 3],
    /// Style-subnet L-Block convolutions.
    pub luma: [usize; 3],
    /// Resize-convolutions after the joined residual trunk.
    pub upsample: [usize; 2],
    /// Width of the enhance subnet's extra downsampling stage (RGB, L).
    pub enhance_extra: [usize; 2],
    /// Enhance-subnet resize-convolutions.
    pub enhance_upsample: [usize; 3],
    pub refine: [usize; 3],
    pub refine_upsample: [usize; 2],
    /// The divisor these widths were derived with (1 for full size).
    pub divisor: usize,
}

impl NetworkWidths {
    pub fn full() -> Self {
        NetworkWidths {
            rgb: [32, 64, 128],
            luma: [16, 32, 64],
            upsample: [64, 32],
            enhance_extra: [160, 80],
            enhance_upsample: [128, 64, 32],
            refine: [16, 32, 64],
            refine_upsample: [32, 16],
            divisor: 1,
        }
    }

    /// Full widths divided by `divisor`, each at least one.
    pub fn divided(divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::Config("width divisor must be positive".into()));
        }
        let d = |w: usize| (w / divisor).max(1);
        let f = Self::full();
        let w = NetworkWidths {
            rgb: f.rgb.map(d),
            luma: f.luma.map(d),
            upsample: f.upsample.map(d),
            enhance_extra: f.enhance_extra.map(d),
            enhance_upsample: f.enhance_upsample.map(d),
            refine: f.refine.map(d),
            refine_upsample: f.refine_upsample.map(d),
            divisor,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.to_fields();
        if all.iter().any(|&v| v == 0) {
            return Err(Error::Config(format!("all network widths must be positive: {self:?}")));
        }
        if self.luma.iter().zip(&self.rgb).any(|(l, r)| l > r) || self.enhance_extra[1] > self.enhance_extra[0] {
            return Err(Error::Config(format!("L-Block widths may not exceed RGB-Block widths: {self:?}")));
        }
        Ok(())
    }

    /// Fixed-order list used by the checkpoint widths block.
    pub fn to_fields(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(19);
        v.extend(self.rgb);
        v.extend(self.luma);
        v.extend(self.upsample);
        v.extend(self.enhance_extra);
        v.extend(self.enhance_upsample);
        v.extend(self.refine);
        v.extend(self.refine_upsample);
        v.push(self.divisor);
        v
    }

    pub fn from_fields(f: &[usize]) -> Result<Self> {
        if f.len() != 19 {
            return Err(Error::Malformed { what: "widths block", detail: format!("{} fields, expected 19", f.len()) });
        }
        let w = NetworkWidths {
            rgb: [f[0], f[1], f[2]],
            luma: [f[3], f[4], f[5]],
            upsample: [f[6], f[7]],
            enhance_extra: [f[8], f[9]],
            enhance_upsample: [f[10], f[11], f[12]],
            refine: [f[13], f[14], f[15]],
            refine_upsample: [f[16], f[17]],
            divisor: f[18],
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubnetKind {
    Style,
    Enhance,
    Refine,
}

impl SubnetKind {
    pub const ALL: [SubnetKind; 3] = [SubnetKind::Style, SubnetKind::Enhance, SubnetKind::Refine];

    pub fn prefix(self) -> &'static str {
        match self {
            SubnetKind::Style => "style",
            SubnetKind::Enhance => "enhance",
            SubnetKind::Refine => "refine",
        }
    }
}

/// One layer of a subnet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    /// Convolution followed by instance norm and ReLU.
    Conv { name: String, cin: usize, cout: usize, kernel: usize, stride: usize },
    /// conv → norm → relu → conv → norm, plus the input.
    Residual { name: String, channels: usize },
    /// Nearest 2× upsampling then a 3×3 convolution with norm and ReLU.
    ResizeConv { name: String, cin: usize, cout: usize },
}

#[derive(Debug, Clone)]
pub struct SubnetArch {
    pub kind: SubnetKind,
    /// Branch on the RGB input (the only branch of the refine subnet).
    pub rgb: Vec<Stage>,
    /// Branch on the luminance channel; empty for single-branch subnets.
    pub luma: Vec<Stage>,
    /// Layers after the branches are joined along channels.
    pub trunk: Vec<Stage>,
    /// Width entering the final 3×3 convolution to RGB.
    pub head_in: usize,
}

struct ParamDecl {
    name: String,
    dims: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform { fan_in: usize },
    Const(f64),
}

fn conv_stage(name: String, cin: usize, cout: usize, kernel: usize, stride: usize) -> Stage {
    Stage::Conv { name, cin, cout, kernel, stride }
}

fn encoder(prefix: &str, input: usize, widths: &[usize]) -> Vec<Stage> {
    let mut stages = vec![conv_stage(format!("{prefix}.conv1"), input, widths[0], 9, 1)];
    for i in 1..widths.len() {
        stages.push(conv_stage(format!("{prefix}.conv{}", i + 1), widths[i - 1], widths[i], 3, 2));
    }
    let last = *widths.last().expect("non-empty widths");
    stages.extend((1..=3).map(|i| Stage::Residual { name: format!("{prefix}.res{i}"), channels: last }));
    stages
}

fn decoder(prefix: &str, joined: usize, ups: &[usize]) -> Vec<Stage> {
    let mut stages: Vec<Stage> =
        (1..=3).map(|i| Stage::Residual { name: format!("{prefix}.res{i}"), channels: joined }).collect();
    let mut prev = joined;
    for (i, &u) in ups.iter().enumerate() {
        stages.push(Stage::ResizeConv { name: format!("{prefix}.up{}", i + 1), cin: prev, cout: u });
        prev = u;
    }
    stages
}

impl SubnetArch {
    pub fn new(kind: SubnetKind, w: &NetworkWidths) -> Self {
        match kind {
            SubnetKind::Style => SubnetArch {
                kind,
                rgb: encoder("rgb", 3, &w.rgb),
                luma: encoder("luma", 1, &w.luma),
                trunk: decoder("trunk", w.rgb[2] + w.luma[2], &w.upsample),
                head_in: w.upsample[1],
            },
            SubnetKind::Enhance => {
                let rgb = [w.rgb[0], w.rgb[1], w.rgb[2], w.enhance_extra[0]];
                let luma = [w.luma[0], w.luma[1], w.luma[2], w.enhance_extra[1]];
                SubnetArch {
                    kind,
                    rgb: encoder("rgb", 3, &rgb),
                    luma: encoder("luma", 1, &luma),
                    trunk: decoder("trunk", w.enhance_extra[0] + w.enhance_extra[1], &w.enhance_upsample),
                    head_in: w.enhance_upsample[2],
                }
            }
            SubnetKind::Refine => {
                let mut rgb = encoder("rgb", 3, &w.refine);
                let mut prev = w.refine[2];
                for (i, &u) in w.refine_upsample.iter().enumerate() {
                    rgb.push(Stage::ResizeConv { name: format!("rgb.up{}", i + 1), cin: prev, cout: u });
                    prev = u;
                }
                SubnetArch { kind, rgb, luma: vec![], trunk: vec![], head_in: w.refine_upsample[1] }
            }
        }
    }

    /// Spatial reduction factor at the bottleneck.
    pub fn downsampling_factor(&self) -> usize {
        let strides = self.rgb.iter().filter(|s| matches!(s, Stage::Conv { stride: 2, .. })).count();
        1 << strides
    }

    fn decls(&self) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<ParamDecl>, name: &str, cin: usize, cout: usize, k: usize, norm: bool| {
            let fan_in = cin * k * k;
            out.push(ParamDecl { name: format!("{name}.weight"), dims: vec![cout, cin, k, k], init: Init::Uniform { fan_in } });
            out.push(ParamDecl { name: format!("{name}.bias"), dims: vec![cout], init: Init::Uniform { fan_in } });
            if norm {
                out.push(ParamDecl { name: format!("{name}.gain"), dims: vec![cout], init: Init::Const(1.0) });
                out.push(ParamDecl { name: format!("{name}.shift"), dims: vec![cout], init: Init::Const(0.0) });
            }
        };
        for stage in self.rgb.iter().chain(&self.luma).chain(&self.trunk) {
            match stage {
                Stage::Conv { name, cin, cout, kernel, .. } => conv(&mut out, name, *cin, *cout, *kernel, true),
                Stage::Residual { name, channels } => {
                    conv(&mut out, &format!("{name}.conv1"), *channels, *channels, 3, true);
                    conv(&mut out, &format!("{name}.conv2"), *channels, *channels, 3, true);
                }
                Stage::ResizeConv { name, cin, cout } => conv(&mut out, name, *cin, *cout, 3, true),
            }
        }
        conv(&mut out, "head", self.head_in, 3, 3, false);
        if self.kind == SubnetKind::Refine {
            for d in out.iter_mut().filter(|d| d.name.starts_with("head.")) {
                d.init = Init::Const(0.0);
            }
        }
        out
    }
}

/// The learnable tensors of one subnet in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetParameters<T: Scalar> {
    pub kind: SubnetKind,
    entries: Vec<(String, usize, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> SubnetParameters<T> {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, _, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, _, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].2)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].2)
    }

    pub fn to_raw(&self) -> Vec<RawTensor> {
        let p = self.kind.prefix();
        self.entries.iter().map(|(n, rank, t)| RawTensor::from_tensor(format!("{p}.{n}"), t, *rank)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> SubnetParameters<U> {
        SubnetParameters {
            kind: self.kind,
            entries: self.entries.iter().map(|(n, r, t)| (n.clone(), *r, t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Leaves for training, or constants for inference.
    pub fn bind(&self, trainable: bool) -> BoundParams<T> {
        let vars = self
            .tensors()
            .map(|t| if trainable { Var::parameter(t.clone()) } else { Var::constant(t.clone()) })
            .collect();
        BoundParams { vars, index: self.index.clone() }
    }

    fn from_decls(kind: SubnetKind, decls: Vec<ParamDecl>, rng: &mut ChaCha8Rng) -> Self {
        let mut entries = Vec::with_capacity(decls.len());
        let mut index = HashMap::new();
        for d in decls {
            let mut dims = [1usize; 4];
            dims[4 - d.dims.len()..].copy_from_slice(&d.dims);
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).expect("positive extents");
            let data = match d.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..shape.numel()).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
                }
                Init::Const(v) => vec![T::from_f64(v); shape.numel()],
            };
            index.insert(d.name.clone(), entries.len());
            entries.push((d.name, d.dims.len(), Tensor::from_vec(shape, data).expect("sized")));
        }
        SubnetParameters { kind, entries, index }
    }

    /// Rebuilds from checkpoint records named `<prefix>.<param>`.
    pub fn from_raw(arch: &SubnetArch, raw: &[RawTensor]) -> Result<Self> {
        let p = arch.kind.prefix();
        let by_name: HashMap<&str, &RawTensor> = raw.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        for d in arch.decls() {
            let key = format!("{p}.{}", d.name);
            let t = by_name.get(key.as_str()).ok_or_else(|| Error::MissingWeight(key.clone()))?;
            if t.dims_usize() != d.dims {
                return Err(Error::DimensionMismatch { name: key, expected: d.dims, found: t.dims_usize() });
            }
            index.insert(d.name.clone(), entries.len());
            entries.push((d.name, d.dims.len(), t.to_tensor()?));
        }
        Ok(SubnetParameters { kind: arch.kind, entries, index })
    }
}

/// A subnet's parameters as graph nodes.
pub struct BoundParams<T: Scalar> {
    vars: Vec<Var<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> BoundParams<T> {
    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.index.get(name).map(|&i| &self.vars[i]).ok_or_else(|| Error::MissingWeight(name.into()))
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    /// Accumulated gradients in declaration order.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars.iter().map(Var::grad).collect()
    }

    pub fn zero_grad(&self) {
        self.vars.iter().for_each(Var::zero_grad);
    }
}

fn conv_layer<T: Scalar>(p: &BoundParams<T>, name: &str, x: &Var<T>, stride: usize, norm_relu: bool) -> Result<Var<T>> {
    let y = x.conv2d(p.get(&format!("{name}.weight"))?, Some(p.get(&format!("{name}.bias"))?), stride)?;
    if !norm_relu {
        return Ok(y);
    }
    let y = y.instance_norm(p.get(&format!("{name}.gain"))?, p.get(&format!("{name}.shift"))?, T::from_f64(NORM_EPS))?;
    Ok(y.relu())
}

/// Residual block: `x + norm(conv(relu(norm(conv(x)))))`.
pub fn residual_block<T: Scalar>(p: &BoundParams<T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
    let h = conv_layer(p, &format!("{name}.conv1"), x, 1, true)?;
    let c2 = format!("{name}.conv2");
    let h = h.conv2d(p.get(&format!("{c2}.weight"))?, Some(p.get(&format!("{c2}.bias"))?), 1)?;
    let h = h.instance_norm(p.get(&format!("{c2}.gain"))?, p.get(&format!("{c2}.shift"))?, T::from_f64(NORM_EPS))?;
    x.add(&h)
}

fn run_stages<T: Scalar>(p: &BoundParams<T>, stages: &[Stage], mut x: Var<T>) -> Result<Var<T>> {
    for stage in stages {
        x = match stage {
            Stage::Conv { name, stride, .. } => conv_layer(p, name, &x, *stride, true)?,
            Stage::Residual { name, .. } => residual_block(p, name, &x)?,
            Stage::ResizeConv { name, .. } => conv_layer(p, name, &x.nearest_upsample2x(), 1, true)?,
        };
    }
    Ok(x)
}

impl SubnetArch {
    pub fn init_parameters<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> SubnetParameters<T> {
        SubnetParameters::from_decls(self.kind, self.decls(), rng)
    }

    /// Input of the L-Block for an RGB input.
    pub fn luma_branch_input<T: Scalar>(&self, x: &Var<T>) -> Result<Var<T>> {
        extract_luminance(x)
    }

    /// Full subnet on a `[0,1]` RGB input; output has the input's extent.
    pub fn forward<T: Scalar>(&self, p: &BoundParams<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::shape(format!("{} subnet expects an RGB input, got {s}", self.kind.prefix())));
        }
        let f = self.downsampling_factor();
        if s.h % f != 0 || s.w % f != 0 {
            return Err(Error::shape(format!(
                "{} subnet input {s} must be divisible by {f}",
                self.kind.prefix()
            )));
        }
        let rgb = run_stages(p, &self.rgb, x.clone())?;
        let joined = if self.luma.is_empty() {
            rgb
        } else {
            let luma = run_stages(p, &self.luma, self.luma_branch_input(x)?)?;
            rgb.concat_channels(&luma)?
        };
        let h = run_stages(p, &self.trunk, joined)?;
        let h = conv_layer(p, "head", &h, 1, false)?;
        match self.kind {
            SubnetKind::Refine => Ok(x.add(&h)?.clamp(T::zero(), T::one())),
            _ => {
                let half = T::from_f64(0.5);
                Ok(h.tanh().affine(half, half))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Per-level working scale: the shorter side of the image each subnet sees
/// and emits, and the scale at which that level's style Grams are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelScale {
    pub input: usize,
    pub output: usize,
    pub style: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalePlan {
    pub mode: Mode,
    pub levels: Vec<LevelScale>,
}

impl ScalePlan {
    fn from_scales(mode: Mode, scales: &[usize]) -> Self {
        let levels = scales.iter().map(|&s| LevelScale { input: s, output: s, style: s }).collect();
        ScalePlan { mode, levels }
    }

    /// 256 → 512 → 512 (divided): no upsampling before the refine subnet.
    pub fn train(divisor: usize) -> Self {
        Self::from_scales(Mode::Train, &[256 / divisor, 512 / divisor, 512 / divisor])
    }

    /// 256 → 512 → 1024 (divided).
    pub fn test(divisor: usize) -> Self {
        Self::test_with_final(1024 / divisor)
    }

    /// Test plan ending at `size`: `size/4 → size/2 → size`.
    pub fn test_with_final(size: usize) -> Self {
        Self::from_scales(Mode::Test, &[size / 4, size / 2, size])
    }

    pub fn with_style_scales(mut self, style: &[usize]) -> Result<Self> {
        if style.len() != self.levels.len() {
            return Err(Error::Config(format!("{} style scales for {} levels", style.len(), self.levels.len())));
        }
        for (l, &s) in self.levels.iter_mut().zip(style) {
            l.style = s;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.iter().any(|l| l.input == 0 || l.style == 0 || l.input != l.output) {
            return Err(Error::Config(format!("invalid scale plan {self:?}")));
        }
        let sizes: Vec<usize> = self.levels.iter().map(|l| l.output).collect();
        let ok = match self.mode {
            Mode::Test => sizes.windows(2).all(|w| w[0] < w[1]),
            Mode::Train => sizes.windows(2).all(|w| w[0] <= w[1]),
        };
        if !ok {
            return Err(Error::Config(format!("scale plan sizes {sizes:?} do not increase")));
        }
        Ok(())
    }
}

/// Extent with shorter side `scale`; the longer side is rounded to a
/// multiple of 8 so every subnet's down/up path round-trips.
pub fn network_extent(h: usize, w: usize, scale: usize) -> (usize, usize) {
    let (h, w) = scaled_extent(h, w, scale);
    let round = |v: usize| if v == scale { v } else { ((v + 4) / 8 * 8).max(8) };
    (round(h), round(w))
}

/// Outputs `ŷ_1..ŷ_k` together with the exact input each subnet consumed.
pub struct MtOutputs<T: Scalar> {
    pub outputs: Vec<Var<T>>,
    pub subnet_inputs: Vec<Var<T>>,
}

/// Parameters `Θ_1..Θ_3` with their architectures.
#[derive(Debug, Clone, PartialEq)]
pub struct MtNetwork<T: Scalar> {
    pub widths: NetworkWidths,
    pub params: [SubnetParameters<T>; 3],
}

pub struct BoundNetwork<T: Scalar> {
    pub subnets: [BoundParams<T>; 3],
}

impl<T: Scalar> BoundNetwork<T> {
    pub fn zero_grad(&self) {
        self.subnets.iter().for_each(BoundParams::zero_grad);
    }
}

impl<T: Scalar> MtNetwork<T> {
    /// Deterministic given `seed`; conv tensors uniform in `±1/√fan_in`,
    /// norm gains one and shifts zero, refine output layer zero.
    pub fn init(widths: NetworkWidths, seed: u64) -> Result<Self> {
        widths.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SubnetKind::ALL.map(|k| SubnetArch::new(k, &widths).init_parameters(&mut rng));
        Ok(MtNetwork { widths, params })
    }

    pub fn arch(&self, k: SubnetKind) -> SubnetArch {
        SubnetArch::new(k, &self.widths)
    }

    pub fn archs(&self) -> [SubnetArch; 3] {
        SubnetKind::ALL.map(|k| self.arch(k))
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(SubnetParameters::scalar_count).sum()
    }

    pub fn bind(&self, trainable: bool) -> BoundNetwork<T> {
        BoundNetwork { subnets: [0, 1, 2].map(|i| self.params[i].bind(trainable)) }
    }

    pub fn cast<U: Scalar>(&self) -> MtNetwork<U> {
        MtNetwork { widths: self.widths.clone(), params: [0, 1, 2].map(|i| self.params[i].cast()) }
    }

    /// Runs the first `levels` stages of `plan` on an RGB image in `[0,1]`.
    pub fn forward(&self, bound: &BoundNetwork<T>, x: &Var<T>, plan: &ScalePlan, levels: usize) -> Result<MtOutputs<T>> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::shape(format!("network input must be RGB, got {s}")));
        }
        if levels == 0 || levels > plan.levels.len() || levels > 3 {
            return Err(Error::Config(format!("levels must be in 1..={}, got {levels}", plan.levels.len().min(3))));
        }
        plan.validate()?;
        let archs = self.archs();
        let mut outputs = Vec::with_capacity(levels);
        let mut subnet_inputs = Vec::with_capacity(levels);
        let mut current = x.clone();
        for k in 0..levels {
            let (h, w) = network_extent(s.h, s.w, plan.levels[k].input);
            let input = current.bilinear_resize(h, w)?;
            let out = archs[k].forward(&bound.subnets[k], &input)?;
            subnet_inputs.push(input);
            outputs.push(out.clone());
            current = out;
        }
        Ok(MtOutputs { outputs, subnet_inputs })
    }

    /// Inference: all three (or fewer) outputs as plain tensors.
    pub fn stylize(&self, x: &Tensor<T>, plan: &ScalePlan, levels: usize) -> Result<Vec<Tensor<T>>> {
        let bound = self.bind(false);
        let out = self.forward(&bound, &Var::constant(x.clone()), plan, levels)?;
        Ok(out.outputs.iter().map(|v| v.value().clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(1, 3, h, w).unwrap();
        Tensor::from_vec(s, (0..s.numel()).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn luminance_values() {
        let px = |r: f64, g: f64, b: f64| {
            let t = Tensor::from_vec(Shape::new(1, 3, 1, 1).unwrap(), vec![r, g, b]).unwrap();
            extract_luminance(&Var::constant(t)).unwrap().value().item()
        };
        assert!((px(1.0, 1.0, 1.0) - 1.0).abs() < 1e-12);
        assert_eq!(px(1.0, 0.0, 0.0), 0.299);
        assert!((px(0.4, 0.4, 0.4) - 0.4).abs() < 1e-12);
        let bad = Var::constant(Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1).unwrap()));
        assert!(extract_luminance(&bad).is_err());
    }

    #[test]
    fn paper_width_parameter_budget() {
        let net = MtNetwork::<f32>::init(NetworkWidths::full(), 0).unwrap();
        let bytes = net.scalar_count() * 4;
        assert!((28_000_000..=42_000_000).contains(&bytes), "{bytes}");
    }

    #[test]
    fn widths_block_round_trip() {
        let w = NetworkWidths::divided(8).unwrap();
        assert_eq!(w.rgb, [4, 8, 16]);
        assert_eq!(NetworkWidths::from_fields(&w.to_fields()).unwrap(), w);
        assert!(NetworkWidths::divided(0).is_err());
    }

    #[test]
    fn tiny_style_subnet_preserves_extent() {
        let net = MtNetwork::<f32>::init(NetworkWidths::divided(8).unwrap(), 1).unwrap();
        let bound = net.bind(false);
        let x = Var::constant(rgb(32, 32, 2));
        let y = net.arch(SubnetKind::Style).forward(&bound.subnets[0], &x).unwrap();
        assert_eq!(y.shape().dims(), [1, 3, 32, 32]);
        assert!(y.value().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn enhance_reaches_one_eighth() {
        let w = NetworkWidths::divided(8).unwrap();
        assert_eq!(SubnetArch::new(SubnetKind::Enhance, &w).downsampling_factor(), 8);
        assert_eq!(SubnetArch::new(SubnetKind::Style, &w).downsampling_factor(), 4);
        let net = MtNetwork::<f32>::init(w, 1).unwrap();
        let y = net
            .arch(SubnetKind::Enhance)
            .forward(&net.bind(false).subnets[1], &Var::constant(rgb(64, 64, 3)))
            .unwrap();
        assert_eq!(y.shape().dims(), [1, 3, 64, 64]);
    }

    #[test]
    fn refine_starts_as_identity() {
        let net = MtNetwork::<f32>::init(NetworkWidths::divided(8).unwrap(), 1).unwrap();
        let x = rgb(16, 16, 4);
        let y = net.arch(SubnetKind::Refine).forward(&net.bind(false).subnets[2], &Var::constant(x.clone())).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn seeds_determine_parameters() {
        let w = NetworkWidths::divided(8).unwrap();
        let a = MtNetwork::<f32>::init(w.clone(), 5).unwrap();
        assert_eq!(a, MtNetwork::<f32>::init(w.clone(), 5).unwrap());
        assert_ne!(a, MtNetwork::<f32>::init(w, 6).unwrap());
    }

    #[test]
    fn plans() {
        let train = ScalePlan::train(1);
        assert_eq!(train.levels.iter().map(|l| l.output).collect::<Vec<_>>(), [256, 512, 512]);
        train.validate().unwrap();
        let test = ScalePlan::test(8);
        assert_eq!(test.levels.iter().map(|l| l.output).collect::<Vec<_>>(), [32, 64, 128]);
        let bad = ScalePlan::from_scales(Mode::Test, &[64, 64, 128]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn level_bounds_checked() {
        let net = MtNetwork::<f32>::init(NetworkWidths::divided(8).unwrap(), 1).unwrap();
        let x = rgb(32, 32, 1);
        assert!(net.stylize(&x, &ScalePlan::test(8), 0).is_err());
        assert!(net.stylize(&x, &ScalePlan::test(8), 4).is_err());
        let out = net.stylize(&x, &ScalePlan::test(8), 1).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].shape().dims(), [1, 3, 32, 32]);
    }
}
