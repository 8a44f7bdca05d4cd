mod common;

use common::{synthetic_content, synthetic_style};
use mtnet::autograd::Var;
use mtnet::checkpoint::Checkpoint;
use mtnet::config::{ContentTarget, CropMode, TrainConfig};
use mtnet::image_io::{encode_image, ImageBuffer};
use mtnet::network::network_extent;
use mtnet::trainer::{content_targets_for, prepare_sample, ContentSource, DatasetIndex, Trainer};
use mtnet::Error;

fn style() -> mtnet::Tensor<f32> {
    synthetic_style(40, 40, 4, [[0.9, 0.2, 0.1], [0.1, 0.3, 0.8]])
}

fn content() -> ContentSource {
    ContentSource::Images(vec![synthetic_content(48, 64), synthetic_content(64, 40), synthetic_content(56, 56)])
}

fn config() -> TrainConfig {
    let mut c = TrainConfig::tiny(8);
    c.seed = 11;
    c.crop = CropMode::Random;
    c
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut straight = Trainer::new(config(), &[style()], content()).unwrap();
    straight.run(6, |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(config(), &[style()], content()).unwrap();
    first.run(3, |_, _| Ok(())).unwrap();
    let saved = Checkpoint {
        iteration: first.iteration,
        config: first.config.to_kv(),
        network: first.network.clone(),
        adam: Some(first.adam.clone()),
    }
    .to_bytes();
    drop(first);

    let ck = Checkpoint::from_bytes(&saved).unwrap();
    let cfg = TrainConfig::from_kv(&ck.config).unwrap();
    let mut resumed =
        Trainer::resume(cfg, ck.network, ck.adam.unwrap(), ck.iteration, &[style()], content()).unwrap();
    resumed.run(6, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.network, straight.network);
    assert_eq!(resumed.adam, straight.adam);
}

#[test]
fn zero_final_weight_freezes_refine() {
    let mut c = config();
    c.lambdas = vec![1.0, 0.5, 0.0];
    let mut t = Trainer::new(c, &[style()], content()).unwrap();
    let before = t.network.clone();
    t.run(3, |_, _| Ok(())).unwrap();
    assert_eq!(t.network.params[2], before.params[2]);
    assert_ne!(t.network.params[0], before.params[0]);
    assert_ne!(t.network.params[1], before.params[1]);
}

#[test]
fn final_loss_alone_trains_every_subnet() {
    let mut c = config();
    c.lambdas = vec![0.0, 0.0, 1.0];
    let mut t = Trainer::new(c, &[style()], content()).unwrap();
    let before = t.network.clone();
    t.run(2, |_, _| Ok(())).unwrap();
    for k in 0..3 {
        assert_ne!(t.network.params[k], before.params[k], "subnet {}", k + 1);
    }
}

#[test]
fn first_subnet_input_is_plain_resize() {
    let t = Trainer::new(config(), &[style()], content()).unwrap();
    let batch = t.batch(0).unwrap();
    let x = Var::constant(batch.clone());
    let bound = t.network.bind(true);
    let out = t.network.forward(&bound, &x, t.plan(), 3).unwrap();
    let s = batch.shape();
    let (h, w) = network_extent(s.h, s.w, t.plan().levels[0].input);
    let want = Var::constant(batch).bilinear_resize(h, w).unwrap();
    assert_eq!(out.subnet_inputs[0].value(), want.value());
}

#[test]
fn content_targets_carry_no_gradient() {
    let t = Trainer::new(config(), &[style()], content()).unwrap();
    let x = Var::constant(t.batch(0).unwrap());
    let bound = t.network.bind(true);
    let out = t.network.forward(&bound, &x, t.plan(), 3).unwrap();
    for mode in [ContentTarget::SubnetInput, ContentTarget::ScaledInput] {
        let targets = content_targets_for(mode, &out, &x, t.plan()).unwrap();
        assert_eq!(targets.len(), 3);
        for (tgt, y) in targets.iter().zip(&out.outputs) {
            assert!(!tgt.requires_grad());
            assert_eq!(tgt.shape(), y.shape());
        }
    }
    // the second subnet's input is the first output, yet its target is cut off
    assert!(out.subnet_inputs[1].requires_grad());
}

#[test]
fn sample_is_square_crop_of_shorter_side() {
    let img = synthetic_content(480, 640);
    let mut rng = common::rng(0);
    let s = prepare_sample(&img, 512, CropMode::Center, &mut rng).unwrap();
    assert_eq!(s.shape().dims(), [1, 3, 512, 512]);
    let r = prepare_sample(&img, 512, CropMode::Random, &mut rng).unwrap();
    assert_eq!(r.shape().dims(), [1, 3, 512, 512]);
}

#[test]
fn dataset_filters_small_images() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, w: usize, h: usize| {
        let img = ImageBuffer::new(w, h, vec![90; 3 * w * h]).unwrap();
        encode_image(&img, dir.path().join(name)).unwrap();
    };
    write("big.png", 500, 500);
    write("small.ppm", 300, 300);
    write("wide.ppm", 900, 479);
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
    let idx = DatasetIndex::scan(dir.path(), 480).unwrap();
    let names: Vec<_> = idx.paths.iter().map(|p| p.file_name().unwrap().to_str().unwrap()).collect();
    assert_eq!(names, ["big.png"]);
    assert_eq!(idx.skipped, 2);

    let small = tempfile::tempdir().unwrap();
    let img = ImageBuffer::new(300, 300, vec![0; 270_000]).unwrap();
    encode_image(&img, small.path().join("a.ppm")).unwrap();
    assert!(matches!(DatasetIndex::scan(small.path(), 480), Err(Error::EmptyDataset { .. })));
}
