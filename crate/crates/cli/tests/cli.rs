use std::path::Path;
use std::process::{Command, Output};

use mtnet::image_io::{decode_image, encode_image, ImageBuffer};

fn mtnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtnet")).args(args).output().expect("binary runs")
}

fn noise_image(path: &Path, w: usize, h: usize, seed: u32) {
    let mut state = seed.wrapping_mul(2_654_435_761).max(1);
    let data = (0..3 * w * h)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            (state >> 24) as u8
        })
        .collect();
    encode_image(&ImageBuffer::new(w, h, data).unwrap(), path).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let content = dir.path().join("content");
        std::fs::create_dir(&content).unwrap();
        noise_image(&content.join("a.ppm"), 48, 40, 1);
        noise_image(&content.join("b.png"), 40, 52, 2);
        noise_image(&content.join("tiny.ppm"), 16, 16, 3);
        noise_image(&dir.path().join("style.ppm"), 36, 36, 4);
        noise_image(&dir.path().join("style2.ppm"), 36, 36, 5);
        std::fs::write(dir.path().join("train.cfg"), "# smoke run\nmin_dim=32\ncheckpoint_every=2\n").unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (cfg, style, content, out) = (self.path("train.cfg"), self.path("style.ppm"), self.path("content"), self.path(out));
        let mut args = vec![
            "train", "--config", s(&cfg), "--style", s(&style), "--content-dir", s(&content), "--tiny", "8", "--iters",
            "3", "--seed", "11", "--output", s(&out),
        ];
        args.extend_from_slice(extra);
        mtnet(&args)
    }
}

#[test]
fn train_stylize_bench_round() {
    let fx = Fixture::new();
    let out = fx.train("run", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = fx.path("run");
    for f in ["final.mtck", "checkpoint_000002.mtck", "loss.csv", "manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter,lr,ls1,ls2,ls3,lh");
    assert_eq!(lines.len(), 4);
    let manifest = std::fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"dataset_admitted\": \"2\""));
    assert!(manifest.contains("\"tiny\": \"8\""));

    let again = fx.train("run2", &[]);
    assert!(again.status.success());
    assert_eq!(std::fs::read(run.join("final.mtck")).unwrap(), std::fs::read(fx.path("run2/final.mtck")).unwrap());

    let model = run.join("final.mtck");
    let input = fx.path("input.ppm");
    noise_image(&input, 70, 50, 9);
    let stylize = |out: &Path, extra: &[&str]| {
        let mut args = vec!["stylize", "--model", s(&model), "--input", s(&input), "--output", s(out)];
        args.extend_from_slice(extra);
        mtnet(&args)
    };
    let o1 = fx.path("o1.ppm");
    let r = stylize(&o1, &["--size", "64", "--emit-intermediate"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let img = decode_image(&o1).unwrap();
    assert_eq!(img.height, 64);
    assert_eq!(decode_image(fx.path("o1_level1.ppm")).unwrap().height, 16);
    assert_eq!(decode_image(fx.path("o1_level2.ppm")).unwrap().height, 32);
    assert!(fx.path("o1.ppm.json").exists());

    let o2 = fx.path("o2.ppm");
    assert!(stylize(&o2, &["--size", "64", "--emit-intermediate"]).status.success());
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());

    let o3 = fx.path("o3.png");
    assert!(stylize(&o3, &["--levels", "1", "--size", "64"]).status.success());
    assert_eq!(decode_image(&o3).unwrap().height, 16);

    assert_eq!(stylize(&fx.path("bad.ppm"), &["--levels", "4"]).status.code(), Some(2));
    assert_eq!(stylize(&fx.path("bad.ppm"), &["--size", "50"]).status.code(), Some(2));

    let report = fx.path("bench.json");
    let b = mtnet(&["bench", "--model", s(&model), "--size", "64", "--reps", "3", "--output", s(&report)]);
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    let text = String::from_utf8_lossy(&b.stdout);
    assert!(text.contains("mean") && text.contains("level 3"));
    assert!(std::fs::read_to_string(&report).unwrap().contains("\"split_error\""));
    assert_eq!(mtnet(&["bench", "--model", s(&model), "--reps", "0"]).status.code(), Some(2));

    let resumed = fx.train("run3", &["--model", s(&run.join("checkpoint_000002.mtck"))]);
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    assert_eq!(std::fs::read(fx.path("run3/final.mtck")).unwrap(), std::fs::read(run.join("final.mtck")).unwrap());
}

#[test]
fn errors_map_to_exit_codes() {
    let fx = Fixture::new();
    let missing_model = mtnet(&["stylize", "--model", "/nonexistent.mtck", "--input", "x.ppm", "--output", "y.ppm"]);
    assert_eq!(missing_model.status.code(), Some(3));

    let (cfg, content) = (fx.path("train.cfg"), fx.path("content"));
    let missing_style =
        mtnet(&["train", "--config", s(&cfg), "--style", "/nonexistent.png", "--content-dir", s(&content)]);
    assert_eq!(missing_style.status.code(), Some(3));
    assert!(!Path::new("mtnet-run/final.mtck").exists());

    std::fs::write(fx.path("typo.cfg"), "itertions=5\n").unwrap();
    let typo = fx.path("typo.cfg");
    let bad = mtnet(&["train", "--config", s(&typo), "--style", s(&fx.path("style.ppm")), "--content-dir", s(&content)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("itertions"));

    let empty = fx.path("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = fx.path("never");
    let none = mtnet(&[
        "train", "--style", s(&fx.path("style.ppm")), "--content-dir", s(&empty), "--tiny", "8", "--output", s(&out),
    ]);
    assert_eq!(none.status.code(), Some(3));
}

#[test]
fn export_tiny_container() {
    let fx = Fixture::new();
    let out = fx.path("tiny.mtwt");
    let r = mtnet(&["export-weights", "--output", s(&out)]);
    assert!(r.status.success());
    let c = mtnet::loss_network::WeightsContainer::load(&out).unwrap();
    assert_eq!(c.to_bytes(), std::fs::read(&out).unwrap());
    assert_eq!(mtnet(&["export-weights", "--input", "/nonexistent.safetensors", "--output", s(&out)]).status.code(), Some(3));
}
