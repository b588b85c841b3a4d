//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use bninvert::fixture;
use bninvert::formats::{ppm, synd};
use bninvert::pipeline::{init_seed, load_dataset, pixel_range, synthesize, train_from_scratch, LoadedDataset, Stage};
use bninvert_core::graph::Graph;
use bninvert_core::nn::checkpoint::{decode, encode, model_digest};
use bninvert_core::nn::{bn_forward, record_bn_stats, tiny_resnet, BatchNorm, Layer, Mode, Model};
use bninvert_core::synthesis::{matching_loss, generate_dataset, synthesize_batch, LabelScheme, LossOptions, SynthesisConfig};
use bninvert_core::train::{evaluate, Dataset, TrainConfig};
use bninvert_core::Tensor;
use bninvert_oracles::gradcheck::{check_matching_loss, check_primitive, primitives};
use bninvert_oracles::{accuracy_loop, conv2d, ema, matching_value, max_abs_diff, moments, reference_forward};

const WIDTH: usize = 8;
const SEEDS: [u64; 3] = [0, 1, 2];
const BUDGETS: [usize; 3] = [20, 80, 200];

type Outcome = Result<String, String>;

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// State shared by the pipeline criteria.
struct Shared {
    _dir: tempfile::TempDir,
    data: LoadedDataset,
    real: Model<f32>,
    real_acc: f64,
    /// Digest comparisons made around every synthesis call.
    frozen: Vec<(String, bool)>,
    /// `accs[k][seed]`
    accs: Vec<Vec<f64>>,
    synthetic: Option<Dataset<f32>>,
}

impl Shared {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fixture::write_fixture(dir.path(), 0, fixture::TRAIN_SIZE, fixture::TEST_SIZE).unwrap();
        let data = load_dataset(dir.path()).unwrap();
        let t = Instant::now();
        let out = train_from_scratch(WIDTH, init_seed(0, Stage::Pretrain), &TrainConfig::default(), data.train().unwrap(), data.test.as_ref()).unwrap();
        println!("  pretrained TinyResNet: test top1 {:.4} ({:.1}s)", out.final_accuracy(), t.elapsed().as_secs_f64());
        Shared {
            _dir: dir,
            data,
            real_acc: out.final_accuracy(),
            real: out.model,
            frozen: Vec::new(),
            accs: Vec::new(),
            synthetic: None,
        }
    }

    fn synthesize(&mut self, cfg: &SynthesisConfig, label: String) -> Dataset<f32> {
        let before = model_digest(&self.real);
        let ds = synthesize(&self.real, cfg, 1).unwrap();
        self.frozen.push((label, model_digest(&self.real) == before));
        ds.data
    }
}

fn gradient_suite() -> Outcome {
    let mut worst = (String::new(), 0.0f64);
    let mut failed = Vec::new();
    for p in primitives() {
        let e = check_primitive(&p, 20, 0xACCE).map_err(|e| e.to_string())?;
        if !(e < 1e-4) {
            failed.push(p.name.to_string());
        }
        if e > worst.1 {
            worst = (p.name.to_string(), e);
        }
    }
    let count = primitives().len();
    let e1 = check_matching_loss(20, 0xE1, 1e-4, &LossOptions::default()).map_err(|e| e.to_string())?;
    if !(e1 < 1e-4) {
        failed.push("statistics loss".into());
    }
    check(
        failed.is_empty(),
        format!(
            "{count} primitives + full loss, 20 cases each; worst primitive {} {:.1e}, loss {e1:.1e}{}",
            worst.0,
            worst.1,
            if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut worst = [0.0f64; 4];
    // conv2d over a grid of small shapes
    let mut shapes = 0;
    for n in [1, 4] {
        for c in [1, 3, 4] {
            for hw in [3, 5, 8] {
                for k in [1, 2, 3] {
                    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
                        let out = hw + 2 * pad;
                        if out < k || (out - k) % stride != 0 {
                            continue;
                        }
                        let seed = shapes as u64;
                        let x = Tensor::<f64>::randn(&[n, c, hw, hw], 0.0, 1.0, seed).unwrap();
                        let w = Tensor::<f64>::randn(&[2, c, k, k], 0.0, 1.0, seed + 1000).unwrap();
                        let mut g = Graph::new();
                        let (xv, wv) = (g.leaf(&x), g.leaf(&w));
                        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
                        let (want, _) = conv2d(x.data(), [n, c, hw, hw], w.data(), [2, c, k, k], None, stride, pad);
                        worst[0] = worst[0].max(max_abs_diff(g.value(y), &want));
                        shapes += 1;
                    }
                }
            }
        }
    }
    // batch moments, 32-bit path against 64-bit two-pass loops
    for seed in 0..10 {
        let x = Tensor::<f32>::randn(&[4, 3, 5, 5], 0.5, 2.0, seed).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let (m, v) = g.batch_moments(xv).unwrap();
        let up = |s: &[f32]| s.iter().map(|&a| a as f64).collect::<Vec<_>>();
        let (wm, wv) = moments(&up(x.data()), 4, 3, 25);
        worst[1] = worst[1].max(max_abs_diff(&up(g.value(m)), &wm)).max(max_abs_diff(&up(g.value(v)), &wv));
    }
    // running-stat EMA
    let mut bn = BatchNorm::<f64>::new(2);
    let (mut bm, mut bv) = (vec![Vec::new(), Vec::new()], vec![Vec::new(), Vec::new()]);
    for step in 0..12u64 {
        let x = Tensor::<f64>::randn(&[6, 2, 3, 3], step as f64 * 0.3 - 1.0, 1.0 + step as f64 * 0.2, 77 + step).unwrap();
        let (m, v) = moments(x.data(), 6, 2, 9);
        for c in 0..2 {
            bm[c].push(m[c]);
            bv[c].push(v[c]);
        }
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        bn_forward(&mut g, xv, &mut bn, Mode::Train).unwrap();
    }
    for c in 0..2 {
        worst[2] = worst[2]
            .max((bn.running_mean.data()[c] - ema(0.0, &bm[c], 0.1)).abs())
            .max((bn.running_var.data()[c] - ema(1.0, &bv[c], 0.1)).abs());
    }
    // full statistics loss on a TinyResNet with non-trivial BN state
    for seed in 0..5u64 {
        let mut model = tiny_resnet::<f64>([3, 8, 8], 4, 4, seed).unwrap();
        let x0 = Tensor::<f64>::randn(&[8, 3, 8, 8], 0.2, 1.5, 500 + seed).unwrap();
        let mut g = Graph::new();
        let xv = g.leaf(&x0);
        model.forward(&mut g, xv, Mode::Train).unwrap();
        let snap = record_bn_stats(&model).unwrap();
        let x = Tensor::<f64>::randn(&[4, 3, 8, 8], 0.0, 1.0, 600 + seed).unwrap();
        let labels = [0, 1, 2, 3];
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let f = model.forward_frozen(&mut g, xv, Mode::SynthEval).unwrap();
        let (loss, _) = matching_loss(&mut g, &f.bn_stats, &snap, f.logits, &labels, &LossOptions::default()).unwrap();
        let r = reference_forward(&model, x.data(), 4);
        let rec: Vec<(Vec<f64>, Vec<f64>)> = snap.layers().iter().map(|l| (l.mean.clone(), l.var.clone())).collect();
        let (a, b, c) = matching_value(&r.bn_inputs, &rec, &r.logits, 4, &labels);
        worst[3] = worst[3].max((g.scalar(loss) - (a + b + c)).abs());
    }
    // evaluate: exact counting path
    let model = tiny_resnet::<f64>([3, 8, 8], 4, 4, 9).unwrap();
    let x = Tensor::<f64>::randn(&[120, 3, 8, 8], 0.0, 1.0, 10).unwrap();
    let labels: Vec<u16> = (0..120).map(|i| (i % 4) as u16).collect();
    let data = Dataset::new([3, 8, 8], 4, x.data().to_vec(), labels.clone()).unwrap();
    let acc = evaluate(&model, &data).unwrap();
    let exact = acc == accuracy_loop(&model, x.data(), &labels);
    check(
        worst.iter().all(|&d| d < 1e-5) && exact,
        format!(
            "max |diff|: conv2d {:.1e} ({shapes} shapes), moments {:.1e}, EMA {:.1e}, loss {:.1e}; evaluate exact: {exact}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn descent(shared: &mut Shared) -> Outcome {
    let snapshot = record_bn_stats(&shared.real).unwrap();
    let mut ratios = Vec::new();
    let mut all_descend = true;
    for seed in SEEDS {
        let cfg = SynthesisConfig { steps: 200, batch_size: 100, total: 1000, seed, ..Default::default() };
        for b in 0..10 {
            let before = model_digest(&shared.real);
            let out = synthesize_batch(&shared.real, &snapshot, &cfg, b).unwrap();
            shared.frozen.push((format!("synthesize_batch seed {seed} batch {b}"), model_digest(&shared.real) == before));
            let (first, last) = (out.trace[0].total, out.trace.last().unwrap().total);
            all_descend &= last < first;
            ratios.push(last / first);
        }
    }
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    let med = median(ratios);
    check(
        med <= 0.30 && all_descend,
        format!("k=200, 10 batches x 3 seeds: median final/initial {med:.4} (limit 0.30), worst {max:.4}, every batch descends: {all_descend}"),
    )
}

fn trend(shared: &mut Shared) -> Outcome {
    let real_test = shared.data.test().unwrap().clone();
    let clip = pixel_range(&shared.data.manifest);
    println!("  synthesis clipped to the data's pixel range [{:.3}, {:.3}]", clip.0, clip.1);
    for &k in &BUDGETS {
        let mut row = Vec::new();
        for seed in SEEDS {
            let cfg = SynthesisConfig { steps: k, seed, clip: Some(clip), ..Default::default() };
            let ds = shared.synthesize(&cfg, format!("dataset k={k} seed {seed}"));
            let tc = TrainConfig { seed, ..Default::default() };
            let out = train_from_scratch(WIDTH, init_seed(seed, Stage::Train), &tc, &ds, Some(&real_test)).unwrap();
            row.push(out.final_accuracy());
            if k == 200 && seed == 0 {
                shared.synthetic = Some(ds);
            }
        }
        println!("  k={k}: test top1 per seed {row:?}");
        shared.accs.push(row);
    }
    let med: Vec<f64> = shared.accs.iter().map(|r| median(r.clone())).collect();
    let tol = 0.015;
    let monotone = med.windows(2).all(|w| w[1] >= w[0] - tol);
    let floor = med[2] >= 0.375;
    check(
        monotone && floor,
        format!(
            "median top1 k=20 {:.3}, k=80 {:.3}, k=200 {:.3}; non-decreasing within 1.5 points: {monotone}; k=200 >= 0.375: {floor}",
            med[0], med[1], med[2]
        ),
    )
}

fn gap(shared: &Shared) -> Outcome {
    let best = shared.accs.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let diff = shared.real_acc - best;
    check(
        diff >= 0.05,
        format!("real-data model {:.3} vs best synthetic-trained {best:.3}: gap {:.1} points (need >= 5)", shared.real_acc, diff * 100.0),
    )
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
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

fn end_to_end(root: &Path) -> (Vec<(PathBuf, Vec<u8>)>, String) {
    let bin = env!("CARGO_BIN_EXE_bninvert");
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let run = |args: &[&str]| {
        let o = Command::new(bin).args(args).env_remove("BNINVERT_THREADS").output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["make-fixture", "--out", &p("fixture"), "--seed", "7"]);
    let mut log = run(&["pretrain", "--data", &p("fixture"), "--out", &p("pretrain"), "--seed", "7"]);
    log += &run(&["synthesize", "--checkpoint", &p("pretrain/model.bnck"), "--out", &p("synthetic"), "--seed", "7"]);
    log += &run(&["train", "--data", &p("synthetic"), "--out", &p("train"), "--eval-data", &p("fixture"), "--seed", "7"]);
    log += &run(&["eval", "--checkpoint", &p("train/model.bnck"), "--data", &p("fixture")]);
    (files(root), log.replace(&*root.to_string_lossy(), "<root>"))
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, la) = end_to_end(a.path());
    let (fb, lb) = end_to_end(b.path());
    let names: Vec<_> = fa.iter().map(|(p, _)| p.clone()).collect();
    let differing: Vec<_> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.display().to_string()).collect();
    let key = ["pretrain/model.bnck", "train/model.bnck", "synthetic/train-images.bin", "pretrain/metrics.csv", "train/metrics.csv"];
    let present = key.iter().all(|k| names.iter().any(|n| n == Path::new(k)));
    let same = fa.len() == fb.len() && differing.is_empty() && la == lb;
    check(
        same && present,
        format!("two seeded CLI runs: {} files compared, differing: {differing:?}, stdout identical: {}", fa.len(), la == lb),
    )
}

fn round_trips(shared: &Shared) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let bits = |d: &Dataset<f32>| d.images().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    // SYND: raw fixture splits and a synthetic dataset
    let (tr, te) = fixture::generate(0, fixture::TRAIN_SIZE, fixture::TEST_SIZE).unwrap();
    let syn = shared.synthetic.clone().ok_or("no synthetic dataset")?;
    let mut m = synd::Manifest::new("rt", 4, fixture::DIMS);
    synd::write_dataset(dir.path(), &mut m, &[("train", &tr), ("test", &te), ("syn", &syn)]).unwrap();
    let mpath = dir.path().join(synd::MANIFEST_FILE);
    let back = synd::read_manifest(&mpath).unwrap();
    let mut synd_ok = back == m;
    for (name, d) in [("train", &tr), ("test", &te), ("syn", &syn)] {
        let r = synd::read_split(&mpath, &back, name).unwrap();
        synd_ok &= bits(&r) == bits(d) && r.labels() == d.labels();
    }
    // BNCK
    let enc = encode(&shared.real);
    let dec = decode(&enc).unwrap();
    let param_bits = |m: &mut Model<f32>| {
        let mut v: Vec<u32> = m.params_mut().iter().flat_map(|p| p.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect();
        fn bn(layers: &[Layer<f32>], v: &mut Vec<u32>) {
            for l in layers {
                match l {
                    Layer::BatchNorm(b) => v.extend(b.running_mean.data().iter().chain(b.running_var.data()).map(|x| x.to_bits())),
                    Layer::Residual(inner) => bn(inner, v),
                    _ => {}
                }
            }
        }
        bn(m.layers(), &mut v);
        v
    };
    let bnck_ok = encode(&dec) == enc && param_bits(&mut dec.clone()) == param_bits(&mut shared.real.clone());
    // PPM
    let mut worst = 0.0f64;
    for i in 0..syn.len() {
        let img = syn.image(i);
        let (w, h, rgb) = ppm::decode(&ppm::encode_image(img, fixture::DIMS).unwrap()).ok_or("ppm reparse failed")?;
        if (w, h) != (16, 16) {
            return Err(format!("ppm dims {w}x{h}"));
        }
        let lo = img.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        for c in 0..3 {
            for p in 0..256 {
                let want = (img[c * 256 + p] as f64 - lo) / (hi - lo);
                worst = worst.max((want - rgb[p * 3 + c] as f64 / 255.0).abs());
            }
        }
    }
    let ppm_ok = worst <= 1.0 / 255.0;
    check(
        synd_ok && bnck_ok && ppm_ok,
        format!(
            "SYND bitwise: {synd_ok}; BNCK bitwise: {bnck_ok}; PPM worst reparse error {:.2}/255 over {} images",
            worst * 255.0,
            syn.len()
        ),
    )
}

fn frozen(shared: &mut Shared) -> Outcome {
    let small = SynthesisConfig { steps: 5, batch_size: 20, total: 40, ..Default::default() };
    let matrix = [
        ("match_std", SynthesisConfig { match_std: true, ..small.clone() }),
        ("clip", SynthesisConfig { clip: Some((-1.5, 1.5)), ..small.clone() }),
        ("random_balanced", SynthesisConfig { label_scheme: LabelScheme::RandomBalanced, ..small.clone() }),
        ("weights", SynthesisConfig { bn_weight: 0.5, ce_weight: 2.0, ..small.clone() }),
        ("b_s=4", SynthesisConfig { batch_size: 4, total: 8, ..small.clone() }),
    ];
    for (name, cfg) in matrix {
        shared.synthesize(&cfg, name.to_string());
        let model = shared.real.clone();
        let before = model_digest(&model);
        generate_dataset(&model, &record_bn_stats(&model).unwrap(), &cfg).unwrap();
        shared.frozen.push((format!("{name} (sequential)"), model_digest(&model) == before));
    }
    let bad: Vec<_> = shared.frozen.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.clone()).collect();
    check(bad.is_empty(), format!("{} synthesis calls, model SHA-256 changed in: {bad:?}", shared.frozen.len()))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| f())).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = t.elapsed();
        let mut res = res;
        if let (Some(limit), Ok(msg)) = (limit, &res) {
            if elapsed > limit {
                res = Err(format!("{msg}; runtime {:.0}s over limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()));
            }
        }
        let (tag, msg) = match res {
            Ok(m) => ("PASS", m),
            Err(m) => {
                failures += 1;
                ("FAIL", m)
            }
        };
        println!("criterion {id} [{name}]: {tag}: {msg} ({:.1}s)", elapsed.as_secs_f64());
    };
    let min = |m: u64| Some(Duration::from_secs(60 * m));

    report(1, "gradient suite", min(2), &mut gradient_suite);
    report(2, "oracle equivalence", min(2), &mut oracle_equivalence);
    let mut shared = Shared::new();
    report(3, "descent", min(10), &mut || descent(&mut shared));
    report(4, "trend over k", min(45), &mut || trend(&mut shared));
    report(5, "real vs synthetic gap", None, &mut || gap(&shared));
    report(6, "determinism", min(30), &mut determinism);
    report(7, "format round-trips", min(1), &mut || round_trips(&shared));
    report(8, "frozen model", None, &mut || frozen(&mut shared));

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
