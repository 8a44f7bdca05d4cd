//! The user-facing commands: `train`, `stylize`, `bench` and
//! `export-weights`, plus run manifests and exit codes.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::codec::RawTensor;
use crate::config::{parse_kv, TrainConfig};
use crate::error::{Error, Result};
use crate::image_io;
use crate::loss_network::{ChannelOrder, LossNetworkSpec, WeightsContainer, TINY_LOSS_SEED};
use crate::network::{network_extent, MtNetwork, ScalePlan};
use crate::tensor::{Shape, Tensor};
use crate::trainer::{ContentSource, DatasetIndex, Trainer, LOG_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::UnknownLayer(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::Autodiff(_) => EXIT_NUMERIC,
        Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Truncated { .. }
        | Error::Malformed { .. }
        | Error::DimensionMismatch { .. }
        | Error::MissingWeight(_)
        | Error::Decode { .. }
        | Error::EmptyDataset { .. }
        | Error::Io { .. } => EXIT_IO,
    }
}

/// Machine-readable record of one command invocation. Everything except
/// `timings_ms` is a function of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: None,
            config: BTreeMap::new(),
            artifacts: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    fn time(&mut self, stage: &str, start: Instant) {
        self.timings_ms.insert(stage.into(), start.elapsed().as_secs_f64() * 1e3);
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.into(), value.to_string());
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}{suffix}.{ext}"),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

#[derive(Debug, Clone)]
pub struct StylizeArgs {
    pub model: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub levels: usize,
    /// Shorter side of the final output; defaults to 1024 over the model's divisor.
    pub size: Option<usize>,
    pub emit_intermediate: bool,
}

/// Test-mode plan ending at `size`, or the model's default.
pub fn stylize_plan(network: &MtNetwork<f32>, size: Option<usize>) -> Result<ScalePlan> {
    let plan = match size {
        Some(s) => ScalePlan::test_with_final(s),
        None => ScalePlan::test(network.widths.divisor),
    };
    let last = plan.levels[2].output;
    if last == 0 || last % 32 != 0 {
        return Err(Error::Config(format!("size must be a positive multiple of 32, got {last}")));
    }
    plan.validate()?;
    Ok(plan)
}

/// Stylizes one image; writes `ŷ_levels` to `output` and, when asked, the
/// earlier outputs to `<stem>_level<k>.<ext>`.
pub fn cmd_stylize(args: &StylizeArgs) -> Result<RunManifest> {
    let mut m = RunManifest::new("stylize");
    if !(1..=3).contains(&args.levels) {
        return Err(Error::Config(format!("levels must be 1, 2 or 3, got {}", args.levels)));
    }
    let t = Instant::now();
    let ckpt = Checkpoint::load(&args.model)?;
    m.time("load", t);
    let plan = stylize_plan(&ckpt.network, args.size)?;

    let t = Instant::now();
    let x = image_io::to_tensor::<f32>(&image_io::decode_image(&args.input)?);
    m.time("decode", t);

    let t = Instant::now();
    let outputs = ckpt.network.stylize(&x, &plan, args.levels)?;
    m.time("forward", t);

    let t = Instant::now();
    let last = outputs.last().expect("at least one level");
    image_io::encode_image(&image_io::from_tensor(last)?, &args.output)?;
    m.artifacts.push(args.output.display().to_string());
    if args.emit_intermediate {
        for (k, y) in outputs.iter().enumerate().take(outputs.len() - 1) {
            let p = with_suffix(&args.output, &format!("_level{}", k + 1));
            image_io::encode_image(&image_io::from_tensor(y)?, &p)?;
            m.artifacts.push(p.display().to_string());
        }
    }
    m.time("encode", t);

    m.set("model", args.model.display());
    m.set("input", args.input.display());
    m.set("levels", args.levels);
    m.set("sizes", plan.levels.iter().take(args.levels).map(|l| l.output.to_string()).collect::<Vec<_>>().join(","));
    m.set("emit_intermediate", args.emit_intermediate);
    m.set("output_extent", format!("{}x{}", last.shape().w, last.shape().h));
    m.write(manifest_path(&args.output))?;
    Ok(m)
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub style: Option<PathBuf>,
    pub style2: Option<PathBuf>,
    pub content_dir: Option<PathBuf>,
    /// Directory receiving checkpoints, the loss log and the manifest.
    pub output: PathBuf,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// `key=value` pairs applied after the configuration file.
    pub overrides: Vec<(String, String)>,
}

/// Configuration file, then command-line overrides.
pub fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut explicit_levels = false;
    if let Some(p) = &args.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        for (k, v) in parse_kv(&text)? {
            explicit_levels |= k == "style_levels";
            cfg.set(&k, &v)?;
        }
    }
    for (k, v) in &args.overrides {
        explicit_levels |= k == "style_levels";
        cfg.set(k, v)?;
    }
    if args.style2.is_some() && !explicit_levels {
        cfg.style_levels = vec![0, 1, 1];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_style(path: &Path) -> Result<Tensor<f32>> {
    Ok(image_io::to_tensor(&image_io::decode_image(path)?))
}

/// Runs training to `iterations`, writing `checkpoint_<iter>.mtck` every
/// `checkpoint_every` iterations, `final.mtck`, `loss.csv` and
/// `manifest.json` under `args.output`.
pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    let mut m = RunManifest::new("train");
    let cfg = resolve_config(args)?;
    let style_path = args.style.as_ref().ok_or_else(|| Error::Config("--style is required".into()))?;
    let content_dir = args.content_dir.as_ref().ok_or_else(|| Error::Config("--content-dir is required".into()))?;

    let t = Instant::now();
    let mut styles = vec![load_style(style_path)?];
    if let Some(p) = &args.style2 {
        styles.push(load_style(p)?);
    }
    let index = DatasetIndex::scan(content_dir, cfg.min_dim)?;
    m.set("dataset_admitted", index.paths.len());
    m.set("dataset_skipped", index.skipped);
    std::fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
    m.time("setup", t);

    let t = Instant::now();
    let content = ContentSource::Directory(index);
    let mut trainer = match &args.resume {
        None => Trainer::new(cfg.clone(), &styles, content)?,
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let adam = ck.adam.unwrap_or_else(|| crate::trainer::AdamState::new(&ck.network));
            Trainer::resume(cfg.clone(), ck.network, adam, ck.iteration, &styles, content)?
        }
    };
    m.time("style_targets", t);

    let log_path = args.output.join("loss.csv");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if log.metadata().map(|md| md.len() == 0).unwrap_or(true) {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    let config_echo = cfg.to_kv();
    let save = |tr: &Trainer, path: &Path| -> Result<()> {
        Checkpoint {
            iteration: tr.iteration,
            config: config_echo.clone(),
            network: tr.network.clone(),
            adam: Some(tr.adam.clone()),
        }
        .save(path)
    };

    let t = Instant::now();
    let every = cfg.checkpoint_every;
    trainer.run(cfg.iterations, |tr, report| {
        writeln!(log, "{}", report.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && tr.iteration % every == 0 && tr.iteration < cfg.iterations {
            save(tr, &args.output.join(format!("checkpoint_{:06}.mtck", tr.iteration)))?;
        }
        Ok(())
    })?;
    m.time("train", t);

    let final_path = args.output.join("final.mtck");
    save(&trainer, &final_path)?;
    m.artifacts.push(final_path.display().to_string());
    m.artifacts.push(log_path.display().to_string());
    m.seed = Some(cfg.seed);
    for (k, v) in parse_kv(&config_echo)? {
        m.config.insert(k, v);
    }
    m.set("style", style_path.display());
    if let Some(p) = &args.style2 {
        m.set("style2", p.display());
    }
    m.set("content_dir", content_dir.display());
    m.write(args.output.join("manifest.json"))?;
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub model: PathBuf,
    pub size: Option<usize>,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub reps: usize,
    pub size: usize,
    pub load_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Mean time of each level (resize plus subnet).
    pub stage_mean_ms: [f64; 3],
    /// `|Σ stages − total| / total` over all repetitions.
    pub split_error: f64,
    pub peak_rss_kb: Option<u64>,
}

impl BenchReport {
    /// `{"report": ..., "manifest": ...}`.
    pub fn to_json(&self, manifest: &RunManifest) -> String {
        let v = serde_json::json!({ "report": self, "manifest": manifest });
        serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
    }
}

/// Peak resident set size from `/proc/self/status`, when available.
pub fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

/// Times `reps` full stylizations of a fixed random square input; model
/// loading is timed separately and excluded from the statistics.
pub fn cmd_bench(args: &BenchArgs) -> Result<(BenchReport, RunManifest)> {
    if args.reps == 0 {
        return Err(Error::Config("--reps must be positive".into()));
    }
    let mut m = RunManifest::new("bench");
    let t = Instant::now();
    let ckpt = Checkpoint::load(&args.model)?;
    let bound = ckpt.network.bind(false);
    let load_ms = t.elapsed().as_secs_f64() * 1e3;
    m.time("load", t);

    let plan = stylize_plan(&ckpt.network, args.size)?;
    let size = plan.levels[2].output;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let shape = Shape::new(1, 3, size, size)?;
    let x = Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.gen::<f32>()).collect())?;
    let archs = ckpt.network.archs();

    let mut totals = Vec::with_capacity(args.reps);
    let mut stages = [0.0f64; 3];
    let mut stage_sum = 0.0;
    let t = Instant::now();
    for _ in 0..args.reps {
        let start = Instant::now();
        let mut current = Var::constant(x.clone());
        let mut mark = start;
        for (k, arch) in archs.iter().enumerate() {
            let (h, w) = network_extent(size, size, plan.levels[k].input);
            current = arch.forward(&bound.subnets[k], &current.bilinear_resize(h, w)?)?;
            let now = Instant::now();
            let d = (now - mark).as_secs_f64() * 1e3;
            stages[k] += d;
            stage_sum += d;
            mark = now;
        }
        totals.push(start.elapsed().as_secs_f64() * 1e3);
    }
    m.time("bench", t);

    let n = args.reps as f64;
    let total: f64 = totals.iter().sum();
    let mean = total / n;
    let std = (totals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let report = BenchReport {
        reps: args.reps,
        size,
        load_ms,
        mean_ms: mean,
        std_ms: std,
        stage_mean_ms: stages.map(|s| s / n),
        split_error: (stage_sum - total).abs() / total,
        peak_rss_kb: peak_rss_kb(),
    };
    m.seed = Some(args.seed);
    m.set("model", args.model.display());
    m.set("reps", args.reps);
    m.set("size", size);
    Ok((report, m))
}

/// Conv names of VGG-19 in the order of torchvision's `features.N` indices.
pub const TORCHVISION_VGG19_CONVS: [(usize, &str); 16] = [
    (0, "conv1_1"),
    (2, "conv1_2"),
    (5, "conv2_1"),
    (7, "conv2_2"),
    (10, "conv3_1"),
    (12, "conv3_2"),
    (14, "conv3_3"),
    (16, "conv3_4"),
    (19, "conv4_1"),
    (21, "conv4_2"),
    (23, "conv4_3"),
    (25, "conv4_4"),
    (28, "conv5_1"),
    (30, "conv5_2"),
    (32, "conv5_3"),
    (34, "conv5_4"),
];

pub const TORCHVISION_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const TORCHVISION_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Converts torchvision VGG-19 `features.*` weights (safetensors, f32) into
/// a weights container. torchvision normalizes `[0,1]` input by mean and
/// std; the std is folded into `conv1_1` so the container takes mean-
/// subtracted 0..255 input like the rest of the pipeline.
pub fn container_from_safetensors(bytes: &[u8], path: &Path) -> Result<WeightsContainer> {
    let st = safetensors::SafeTensors::deserialize(bytes)
        .map_err(|e| Error::Malformed { what: "safetensors file", detail: format!("{}: {e}", path.display()) })?;
    let spec = LossNetworkSpec::vgg19();
    let geometry: BTreeMap<&str, (usize, usize, usize)> =
        spec.conv_layers().map(|(n, cin, cout, k)| (n, (cin, cout, k))).collect();
    let mut tensors = Vec::new();
    for (idx, name) in TORCHVISION_VGG19_CONVS {
        let (cin, cout, k) = geometry[name];
        for (suffix, dims) in [("weight", vec![cout, cin, k, k]), ("bias", vec![cout])] {
            let key = format!("features.{idx}.{suffix}");
            let view = st.tensor(&key).map_err(|_| Error::MissingWeight(key.clone()))?;
            if view.dtype() != safetensors::Dtype::F32 {
                return Err(Error::Malformed { what: "safetensors file", detail: format!("{key} is {:?}, expected F32", view.dtype()) });
            }
            if view.shape() != dims.as_slice() {
                return Err(Error::DimensionMismatch { name: key, expected: dims, found: view.shape().to_vec() });
            }
            let mut data: Vec<f32> =
                view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            if name == "conv1_1" && suffix == "weight" {
                let per_in = k * k;
                for (i, v) in data.iter_mut().enumerate() {
                    let c = (i / per_in) % cin;
                    *v /= 255.0 * TORCHVISION_STD[c];
                }
            }
            tensors.push(RawTensor {
                name: format!("{name}.{suffix}"),
                dims: dims.iter().map(|&d| d as u32).collect(),
                data,
            });
        }
    }
    Ok(WeightsContainer { channel_order: ChannelOrder::Rgb, mean: TORCHVISION_MEAN.map(|m| m * 255.0), tensors })
}

#[derive(Debug, Clone)]
pub struct ExportArgs {
    /// torchvision VGG-19 safetensors; `None` exports the built-in tiny network.
    pub input: Option<PathBuf>,
    pub output: PathBuf,
}

pub fn cmd_export_weights(args: &ExportArgs) -> Result<RunManifest> {
    let mut m = RunManifest::new("export-weights");
    let t = Instant::now();
    let container = match &args.input {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            m.set("input", p.display());
            m.set("network", "vgg19");
            container_from_safetensors(&bytes, p)?
        }
        None => {
            m.set("network", "tiny");
            WeightsContainer::random(&LossNetworkSpec::tiny(), TINY_LOSS_SEED)
        }
    };
    container.save(&args.output)?;
    m.time("export", t);
    m.artifacts.push(args.output.display().to_string());
    m.write(manifest_path(&args.output))?;
    Ok(m)
}
