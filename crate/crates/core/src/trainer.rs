//! Dataset scanning, Adam, and the hierarchical training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use walkdir::WalkDir;

use crate::autograd::Var;
use crate::config::{ContentTarget, CropMode, LossNetworkChoice, TrainConfig};
use crate::error::{Error, Result};
use crate::image_io;
use crate::loss_network::{
    hierarchical_loss, precompute_style_targets, LossNetwork, LossNetworkSpec, StyleTargets,
};
use crate::network::{network_extent, BoundNetwork, MtNetwork, MtOutputs, ScalePlan};
use crate::tensor::{Scalar, Shape, Tensor};

const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const CROP_SALT: u64 = 0xC2B2_AE3D_27D4_EB4F;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "ppm"];

/// Permutation of `0..len` for one pass over the data.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

/// Image files under a directory whose shorter side is at least `min_dim`,
/// sorted by path.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub dir: PathBuf,
    pub paths: Vec<PathBuf>,
    pub skipped: usize,
}

impl DatasetIndex {
    pub fn scan(dir: impl AsRef<Path>, min_dim: u32) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        if !dir.is_dir() {
            return Err(Error::io(&dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
        }
        let mut paths = Vec::new();
        let mut skipped = 0;
        for entry in WalkDir::new(&dir).follow_links(true) {
            let entry = entry.map_err(|e| {
                let path = e.path().unwrap_or(&dir).to_path_buf();
                Error::io(path, e.into_io_error().unwrap_or_else(|| std::io::Error::other("directory loop")))
            })?;
            let p = entry.path();
            let is_image = p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)));
            if !entry.file_type().is_file() || !is_image {
                continue;
            }
            match image_io::image_dimensions(p) {
                Ok((w, h)) if w.min(h) >= min_dim as usize => paths.push(p.to_path_buf()),
                _ => skipped += 1,
            }
        }
        if paths.is_empty() {
            return Err(Error::EmptyDataset { dir, min_dim });
        }
        paths.sort();
        Ok(DatasetIndex { dir, paths, skipped })
    }
}

/// Where training images come from.
#[derive(Debug, Clone)]
pub enum ContentSource {
    Directory(DatasetIndex),
    Images(Vec<Tensor<f32>>),
}

impl ContentSource {
    pub fn len(&self) -> usize {
        match self {
            ContentSource::Directory(d) => d.paths.len(),
            ContentSource::Images(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Item index of the `k`-th draw of the shuffled stream.
    pub fn index_at(&self, k: u64, seed: u64) -> usize {
        let n = self.len() as u64;
        epoch_order(n as usize, seed, k / n)[(k % n) as usize]
    }

    fn load(&self, index: usize) -> Result<Tensor<f32>> {
        match self {
            ContentSource::Directory(d) => Ok(image_io::to_tensor(&image_io::decode_image(&d.paths[index])?)),
            ContentSource::Images(v) => Ok(v[index].clone()),
        }
    }
}

/// Square crop of the shorter side, resized to `size × size`.
pub fn prepare_sample(image: &Tensor<f32>, size: usize, crop: CropMode, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let s = image.shape();
    let side = s.h.min(s.w);
    let (y0, x0) = match crop {
        CropMode::Center => ((s.h - side) / 2, (s.w - side) / 2),
        CropMode::Random => (rng.gen_range(0..=s.h - side), rng.gen_range(0..=s.w - side)),
    };
    let shape = Shape::new(1, s.c, side, side)?;
    let mut data = Vec::with_capacity(shape.numel());
    for c in 0..s.c {
        let plane = image.channel(0, c);
        for y in y0..y0 + side {
            data.extend_from_slice(&plane[y * s.w + x0..y * s.w + x0 + side]);
        }
    }
    let cropped = Tensor::from_vec(shape, data)?;
    Ok(Var::constant(cropped).bilinear_resize(size, size)?.value().clone())
}

/// Concatenates single-sample tensors along the batch axis.
pub fn stack<T: Scalar>(samples: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or_else(|| Error::shape("cannot stack zero samples"))?.shape();
    let mut data = Vec::with_capacity(first.numel() * samples.len());
    for t in samples {
        if t.shape() != first {
            return Err(Error::shape(format!("cannot stack {} with {first}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape { n: samples.len(), ..first }, data)
}

/// Per-level content targets, detached from the graph.
pub fn content_targets_for<T: Scalar>(
    mode: ContentTarget,
    outputs: &MtOutputs<T>,
    sample: &Var<T>,
    plan: &ScalePlan,
) -> Result<Vec<Var<T>>> {
    match mode {
        ContentTarget::SubnetInput => Ok(outputs.subnet_inputs.iter().map(Var::detach).collect()),
        ContentTarget::ScaledInput => {
            let s = sample.shape();
            let base = sample.detach();
            outputs
                .outputs
                .iter()
                .zip(&plan.levels)
                .map(|(_, l)| {
                    let (h, w) = network_extent(s.h, s.w, l.output);
                    base.bilinear_resize(h, w)
                })
                .collect()
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments for every parameter of the three subnets.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: [Vec<Tensor<f32>>; 3],
    pub v: [Vec<Tensor<f32>>; 3],
}

impl AdamState {
    pub fn new(network: &MtNetwork<f32>) -> Self {
        let zeros = |i: usize| network.params[i].tensors().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        AdamState { step: 0, m: [0, 1, 2].map(zeros), v: [0, 1, 2].map(zeros) }
    }

    /// One bias-corrected Adam update. A parameter whose gradient and moments
    /// are all zero is left bit-identical.
    pub fn update(&mut self, network: &mut MtNetwork<f32>, grads: &[Vec<Tensor<f32>>; 3], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for s in 0..3 {
            let params = network.params[s].tensors_mut();
            for (((p, g), m), v) in params.zip(&grads[s]).zip(&mut self.m[s]).zip(&mut self.v[s]) {
                let (pd, gd) = (p.data_mut(), g.data());
                for (((pv, &gv), mv), vv) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                    let gv = gv as f64;
                    let mn = ADAM_BETA1 * *mv as f64 + (1.0 - ADAM_BETA1) * gv;
                    let vn = ADAM_BETA2 * *vv as f64 + (1.0 - ADAM_BETA2) * gv * gv;
                    *mv = mn as f32;
                    *vv = vn as f32;
                    let delta = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
                    if delta != 0.0 {
                        *pv = (*pv as f64 - delta) as f32;
                    }
                }
            }
        }
    }
}

/// One training iteration's losses.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub lr: f64,
    /// `L_S^k` per level.
    pub levels: Vec<f64>,
    /// `L_H = Σ λ_k L_S^k`.
    pub total: f64,
}

pub const LOG_HEADER: &str = "iter,lr,ls1,ls2,ls3,lh";

impl StepReport {
    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{}", self.iteration, self.lr);
        for v in &self.levels {
            row.push_str(&format!(",{v}"));
        }
        row.push_str(&format!(",{}", self.total));
        row
    }
}

/// Builds the loss network a configuration asks for.
pub fn loss_network_for(config: &TrainConfig) -> Result<LossNetwork<f32>> {
    let net = match (config.loss_network, &config.loss_weights) {
        (LossNetworkChoice::Tiny, _) | (LossNetworkChoice::Auto, None) => LossNetwork::tiny(),
        (LossNetworkChoice::Vgg19 | LossNetworkChoice::Auto, Some(path)) => {
            LossNetwork::load_weights(path, LossNetworkSpec::vgg19())?
        }
        (LossNetworkChoice::Vgg19, None) => {
            return Err(Error::Config("loss_network=vgg19 needs loss_weights=<file>".into()))
        }
    };
    let net = net.with_pooling(config.pooling);
    config.loss_layers().validate(net.spec())?;
    Ok(net)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub network: MtNetwork<f32>,
    pub adam: AdamState,
    /// Number of completed iterations.
    pub iteration: u64,
    plan: ScalePlan,
    loss_net: LossNetwork<f32>,
    style: StyleTargets<f32>,
    content: ContentSource,
}

impl Trainer {
    pub fn new(config: TrainConfig, styles: &[Tensor<f32>], content: ContentSource) -> Result<Self> {
        config.validate()?;
        let network = MtNetwork::init(config.widths()?, config.seed)?;
        let adam = AdamState::new(&network);
        Self::resume(config, network, adam, 0, styles, content)
    }

    /// Continues from saved state; with the same inputs the run is identical
    /// to one that was never interrupted.
    pub fn resume(
        config: TrainConfig,
        network: MtNetwork<f32>,
        adam: AdamState,
        iteration: u64,
        styles: &[Tensor<f32>],
        content: ContentSource,
    ) -> Result<Self> {
        config.validate()?;
        if content.is_empty() {
            return Err(Error::Config("no training images".into()));
        }
        if network.widths != config.widths()? {
            return Err(Error::Config("network widths do not match the configuration".into()));
        }
        let loss_net = loss_network_for(&config)?;
        let plan = config.plan()?;
        let style_scales: Vec<usize> = plan.levels.iter().map(|l| l.style).collect();
        let style = precompute_style_targets(
            &loss_net,
            styles,
            &config.style_levels,
            &style_scales,
            &config.texture_layers,
        )?;
        Ok(Trainer { config, network, adam, iteration, plan, loss_net, style, content })
    }

    pub fn plan(&self) -> &ScalePlan {
        &self.plan
    }

    pub fn style_targets(&self) -> &StyleTargets<f32> {
        &self.style
    }

    pub fn loss_network(&self) -> &LossNetwork<f32> {
        &self.loss_net
    }

    /// Training batch for iteration `it`.
    pub fn batch(&self, it: u64) -> Result<Tensor<f32>> {
        let b = self.config.batch_size as u64;
        let size = self.plan.levels.iter().map(|l| l.output).max().unwrap_or(1);
        let mut samples = Vec::with_capacity(b as usize);
        for slot in 0..b {
            let draw = it * b + slot;
            let idx = self.content.index_at(draw, self.config.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ CROP_SALT);
            rng.set_stream(draw);
            samples.push(prepare_sample(&self.content.load(idx)?, size, self.config.crop, &mut rng)?);
        }
        stack(&samples)
    }

    /// Forward and backward for one batch without updating parameters.
    pub fn loss_and_grads(&self, bound: &BoundNetwork<f32>, batch: &Tensor<f32>) -> Result<StepReport> {
        let x = Var::constant(batch.clone());
        let out = self.network.forward(bound, &x, &self.plan, 3)?;
        let targets = content_targets_for(self.config.content_target, &out, &x, &self.plan)?;
        let loss = hierarchical_loss(
            &self.loss_net,
            &out.outputs,
            &targets,
            &self.style,
            &self.config.loss_weights()?,
            &self.config.loss_layers(),
        )?;
        let total = loss.total.value().item() as f64;
        if !total.is_finite() {
            let detail = loss
                .levels
                .iter()
                .enumerate()
                .map(|(k, l)| {
                    format!(
                        "level {}: content={} texture={} total={}",
                        k + 1,
                        l.content.value().item(),
                        l.texture.value().item(),
                        l.total.value().item()
                    )
                })
                .collect::<Vec<_>>()
                .join("; ");
            return Err(Error::NonFinite { iteration: self.iteration, detail });
        }
        loss.total.backward()?;
        Ok(StepReport { iteration: self.iteration, lr: self.config.lr_at(self.iteration), levels: loss.level_values(), total })
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let batch = self.batch(self.iteration)?;
        let bound = self.network.bind(true);
        let report = self.loss_and_grads(&bound, &batch)?;
        let grads = [0, 1, 2].map(|i| bound.subnets[i].grads());
        for (k, g) in grads.iter().enumerate() {
            if !g.iter().all(Tensor::all_finite) {
                return Err(Error::NonFinite {
                    iteration: self.iteration,
                    detail: format!("gradient of subnet {} is not finite", k + 1),
                });
            }
        }
        self.adam.update(&mut self.network, &grads, report.lr);
        self.iteration += 1;
        Ok(report)
    }

    /// Steps until `until` iterations are complete, calling `on_step` after each.
    pub fn run(&mut self, until: u64, mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>) -> Result<()> {
        while self.iteration < until {
            let report = self.step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}
