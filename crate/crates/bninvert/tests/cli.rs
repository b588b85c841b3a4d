use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bninvert::config::{RunConfig, RESOLVED_FILE};
use bninvert::formats::csv_out::read_metrics;
use bninvert::formats::save_checkpoint;
use bninvert::pipeline::{load_dataset, pixel_range};
use bninvert::formats::synd::{self, Manifest};
use bninvert_core::nn::{LayerSpec, Model};
use bninvert_core::train::Dataset;
use tempfile::{tempdir, TempDir};

const SMALL: &str = "\
[dataset]
train_size = 200
test_size = 40
[pretrain]
epochs = 2
batch_size = 32
[synthesis]
steps = 5
batch_size = 8
total = 16
[train]
epochs = 2
batch_size = 8
[output]
samples_per_class = 2
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bninvert"));
    c.env_remove("BNINVERT_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Work { dir }
    }

    fn p(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn fixture(&self) -> String {
        ok(run(&["make-fixture", "--out", &self.p("fx"), "--config", &self.p("small.toml")]));
        self.p("fx")
    }

    fn pretrained(&self) -> (String, String) {
        let fx = self.fixture();
        let out = ok(run(&["pretrain", "--data", &fx, "--out", &self.p("pre"), "--config", &self.p("small.toml")]));
        (fx, out)
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn make_fixture_defaults_and_force() {
    let w = Work::new();
    let fx = w.p("fx");
    ok(run(&["make-fixture", "--out", &fx, "--seed", "3"]));
    let m = synd::read_manifest(Path::new(&fx)).unwrap();
    assert_eq!((m.split("train").unwrap().count, m.split("test").unwrap().count), (2000, 500));
    let first = read_dir_bytes(Path::new(&fx));

    let again = run(&["make-fixture", "--out", &fx, "--seed", "3"]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("not empty"));

    ok(run(&["make-fixture", "--out", &fx, "--seed", "3", "--force"]));
    assert_eq!(read_dir_bytes(Path::new(&fx)), first);
    assert!(first.iter().any(|(p, _)| p == Path::new(RESOLVED_FILE)));
}

#[test]
fn pretrain_then_eval_agree() {
    let w = Work::new();
    let (fx, out) = w.pretrained();
    let pre = Path::new(&w.p("pre")).to_path_buf();
    assert!(pre.join("model.bnck").is_file());
    let rows = read_metrics(&pre.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(out, format!("top1={}\n", rows[1].test_acc));
    let eval = ok(run(&["eval", "--checkpoint", &w.p("pre/model.bnck"), "--data", &fx]));
    assert_eq!(eval, out);
    let echo = fs::read_to_string(pre.join(RESOLVED_FILE)).unwrap();
    assert_eq!(RunConfig::parse(&echo).unwrap(), RunConfig::parse(SMALL).unwrap());
}

#[test]
fn missing_inputs_exit_with_usage_code() {
    let w = Work::new();
    let o = run(&["pretrain", "--data", &w.p("nope"), "--out", &w.p("out")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));
    let o = run(&["eval", "--checkpoint", &w.p("nope.bnck"), "--data", &w.p("nope")]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&run(&["pretrain", "--bogus"])), 2);
    assert_eq!(code(&run(&[])), 2);
}

#[test]
fn bad_config_exits_with_usage_code() {
    let w = Work::new();
    fs::write(w.p("bad.toml"), "[synthesis]\nk = 200\n").unwrap();
    let o = run(&["make-fixture", "--out", &w.p("fx"), "--config", &w.p("bad.toml")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));
    assert!(!Path::new(&w.p("fx")).exists());
}

#[test]
fn synthesize_records_provenance_and_is_reproducible() {
    let w = Work::new();
    w.pretrained();
    let ck = w.p("pre/model.bnck");
    let cfg = w.p("small.toml");
    let mut crcs = Vec::new();
    for k in ["2", "3", "4"] {
        let out = w.p(&format!("syn{k}"));
        ok(run(&["synthesize", "--checkpoint", &ck, "--out", &out, "--k", k, "--config", &cfg]));
        let m = synd::read_manifest(Path::new(&out)).unwrap();
        assert_eq!(m.extra["provenance.steps"], k);
        assert_eq!(m.extra["provenance.total"], "16");
        assert_eq!(m.extra["export.normalization"], "per_image_min_max");
        crcs.push(m.split("train").unwrap().images_crc32);
    }
    crcs.sort();
    crcs.dedup();
    assert_eq!(crcs.len(), 3);

    let dir = w.p("syn3");
    let before = read_dir_bytes(Path::new(&dir));
    assert!(before.iter().any(|(p, _)| p == Path::new("trace.csv")));
    assert!(before.iter().any(|(p, _)| p == Path::new("samples/grid.ppm")));
    ok(run(&["synthesize", "--checkpoint", &ck, "--out", &dir, "--k", "3", "--config", &cfg, "--force", "--threads", "2"]));
    assert_eq!(read_dir_bytes(Path::new(&dir)), before);
    let o = bin()
        .args(["synthesize", "--checkpoint", &ck, "--out", &dir, "--k", "3", "--config", &cfg, "--force"])
        .env("BNINVERT_THREADS", "3")
        .output()
        .unwrap();
    ok(o);
    assert_eq!(read_dir_bytes(Path::new(&dir)), before);

    let trace = fs::read_to_string(Path::new(&dir).join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "batch,step,bn_mean,bn_var,ce,total");
    assert_eq!(trace.lines().count(), 1 + 2 * 3);
}

#[test]
fn clip_data_keeps_synthetic_pixels_in_the_data_range() {
    let w = Work::new();
    let (fx, _) = w.pretrained();
    let out = w.p("syn");
    ok(run(&["synthesize", "--checkpoint", &w.p("pre/model.bnck"), "--out", &out, "--config", &w.p("small.toml"), "--clip-data", &fx]));
    let (lo, hi) = pixel_range(&synd::read_manifest(&synd::manifest_path(Path::new(&fx))).unwrap());
    let resolved = RunConfig::load(&Path::new(&out).join("config.resolved.toml")).unwrap();
    assert_eq!((resolved.synthesis.clip_min, resolved.synthesis.clip_max), (Some(lo), Some(hi)));
    let syn = load_dataset(Path::new(&out)).unwrap();
    let images = syn.train().unwrap().images();
    assert!(images.iter().all(|&v| v as f64 >= lo - 1e-5 && v as f64 <= hi + 1e-5));
}

#[test]
fn invalid_thread_env_is_rejected() {
    let w = Work::new();
    w.pretrained();
    let o = bin()
        .args(["synthesize", "--checkpoint", &w.p("pre/model.bnck"), "--out", &w.p("s"), "--config", &w.p("small.toml")])
        .env("BNINVERT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn train_on_synthetic_then_eval_on_real() {
    let w = Work::new();
    let (fx, _) = w.pretrained();
    let cfg = w.p("small.toml");
    ok(run(&["synthesize", "--checkpoint", &w.p("pre/model.bnck"), "--out", &w.p("syn"), "--config", &cfg]));
    let out = ok(run(&["train", "--data", &w.p("syn"), "--out", &w.p("tr"), "--eval-data", &fx, "--config", &cfg]));
    assert!(out.starts_with("top1=") && out.lines().count() == 1, "{out}");
    let eval = ok(run(&["eval", "--checkpoint", &w.p("tr/model.bnck"), "--data", &fx]));
    assert_eq!(eval, out);
    let acc: f64 = eval.trim().strip_prefix("top1=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    ok(run(&["train", "--data", &w.p("syn"), "--out", &w.p("tr2"), "--config", &cfg]));
    let rows = read_metrics(&Path::new(&w.p("tr2")).join("metrics.csv")).unwrap();
    assert!(rows.iter().all(|r| r.test_acc.is_nan()));
}

#[test]
fn mismatched_dims_exit_with_usage_code() {
    let w = Work::new();
    w.pretrained();
    let data = Dataset::new([3, 8, 8], 4, vec![0.0; 4 * 192], vec![0, 1, 2, 3]).unwrap();
    let mut m = Manifest::new("small", 4, [3, 8, 8]);
    synd::write_dataset(Path::new(&w.p("other")), &mut m, &[("test", &data)]).unwrap();
    let o = run(&["eval", "--checkpoint", &w.p("pre/model.bnck"), "--data", &w.p("other")]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn model_without_batchnorm_cannot_be_inverted() {
    let w = Work::new();
    let specs = [LayerSpec::GlobalAvgPool, LayerSpec::Linear { out_features: 4 }];
    let model = Model::<f32>::from_specs([3, 16, 16], &specs, 0).unwrap();
    save_checkpoint(Path::new(&w.p("nobn.bnck")), &model).unwrap();
    let o = run(&["synthesize", "--checkpoint", &w.p("nobn.bnck"), "--out", &w.p("s"), "--config", &w.p("small.toml")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("BatchNorm"), "{}", String::from_utf8_lossy(&o.stderr));
}
