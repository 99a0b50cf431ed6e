//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers. Tests share a lock so timed criteria get the core
//! to themselves; run with `--nocapture` to see every line.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use uctransnet::config::{ExperimentSpec, Mode, ModelConfig};
use uctransnet::data::checkpoint::{load_checkpoint, save_checkpoint};
use uctransnet::data::synthetic::generate_synthetic;
use uctransnet::error::{CheckpointError, Error};
use uctransnet::experiments::{run_gradcheck, run_single, run_skip_ablation};
use uctransnet::metrics;
use uctransnet::model::{cct, forward, init_params, register_params, unet};
use uctransnet::tensor::{Graph, Tensor};
use uctransnet::train::{fit, load_pretrained_unet};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("uctn_accept_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

/// Small deterministic PRNG for oracle inputs.
struct Lcg(u64);

impl Lcg {
    fn new(seed: u64) -> Self {
        Lcg(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        self.0
    }
    fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
    fn signed(&mut self) -> f64 {
        self.unit() * 2.0 - 1.0
    }
    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }
}

// ── criterion 1: gradient correctness ──────────────────────────────────────

#[test]
fn c1_gradient_correctness() {
    let _lock = serial();
    let start = Instant::now();
    let mut spec = ExperimentSpec::default();
    spec.model.base_channels = 4;
    spec.model.heads = 2;
    spec.model.cct_layers = 2;
    spec.image_size = 16;
    spec.out_dir = tmp("c1");

    let report = run_gradcheck(&spec, 200, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(report.checked >= 200, "only {} coordinates checked", report.checked);
    assert!(
        report.passed(),
        "gradient check failed:\n{}",
        report.pretty()
    );
    assert!(report.max_rel_error < 1e-4);
    assert!(secs < 300.0, "took {secs:.1}s, budget 300s");
    println!(
        "PASS criterion 1: gradcheck on 16x16 miniature, {} coords, max rel err {:.2e} < 1e-4, {:.1}s",
        report.checked, report.max_rel_error, secs
    );
}

// ── criterion 2: attention oracle equivalence ──────────────────────────────

/// Naive triple-loop evaluation of channel-wise cross attention; written
/// directly from the definition and independent of the graph kernels.
fn oracle_cross_attention(
    t_i: &[Vec<f64>],  // d × c_i
    t_all: &[Vec<f64>], // d × c_sum
    w_q: &[Vec<f64>],  // c_i × c_i
    w_k: &[Vec<f64>],  // c_sum × c_sum
    w_v: &[Vec<f64>],  // c_sum × c_sum
    eps: f64,
) -> Vec<Vec<f64>> {
    let d = t_i.len();
    let c_i = w_q.len();
    let c_sum = w_k.len();

    let proj = |t: &[Vec<f64>], w: &[Vec<f64>], cols: usize| -> Vec<Vec<f64>> {
        // (T W)ᵀ: channel-major result, cols × d
        let mut out = vec![vec![0.0; d]; cols];
        for (r, row) in t.iter().enumerate() {
            for c in 0..cols {
                let mut acc = 0.0;
                for (k, &tv) in row.iter().enumerate() {
                    acc += tv * w[k][c];
                }
                out[c][r] = acc;
            }
        }
        out
    };
    let q = proj(t_i, w_q, c_i); // c_i × d
    let k = proj(t_all, w_k, c_sum); // c_sum × d
    let v = proj(t_all, w_v, c_sum); // c_sum × d

    // similarity logits Q Kᵀ / sqrt(c_sum)
    let scale = 1.0 / (c_sum as f64).sqrt();
    let mut s = vec![vec![0.0; c_sum]; c_i];
    for (qi, srow) in q.iter().zip(s.iter_mut()) {
        for (kj, sv) in k.iter().zip(srow.iter_mut()) {
            let mut acc = 0.0;
            for t in 0..d {
                acc += qi[t] * kj[t];
            }
            *sv = acc * scale;
        }
    }
    // instance normalization over the whole map
    let n = (c_i * c_sum) as f64;
    let mean = s.iter().flatten().sum::<f64>() / n;
    let var = s.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for row in s.iter_mut() {
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    // row softmax
    for row in s.iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    // CA = M V
    let mut ca = vec![vec![0.0; d]; c_i];
    for i in 0..c_i {
        for t in 0..d {
            let mut acc = 0.0;
            for j in 0..c_sum {
                acc += s[i][j] * v[j][t];
            }
            ca[i][t] = acc;
        }
    }
    ca
}

#[test]
fn c2_attention_oracle_equivalence() {
    let _lock = serial();
    let start = Instant::now();
    let mut rng = Lcg::new(7);
    let mut max_diff = 0.0f64;
    for trial in 0..100 {
        let d = rng.range(1, 8);
        let c_i = rng.range(1, 8);
        // instance norm needs at least two entries in the similarity map
        let c_sum = rng.range(if c_i == 1 { 2 } else { 1 }, 8);

        let mat = |rows: usize, cols: usize, rng: &mut Lcg| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| rng.signed()).collect()).collect()
        };
        let t_i = mat(d, c_i, &mut rng);
        let t_all = mat(d, c_sum, &mut rng);
        let w_q = mat(c_i, c_i, &mut rng);
        let w_k = mat(c_sum, c_sum, &mut rng);
        let w_v = mat(c_sum, c_sum, &mut rng);

        let expected = oracle_cross_attention(&t_i, &t_all, &w_q, &w_k, &w_v, uctransnet::NORM_EPS);

        let flat = |m: &[Vec<f64>]| -> Vec<f64> { m.iter().flatten().copied().collect() };
        let mut g = Graph::<f64>::new();
        let ti = g.constant(Tensor::new(&[d, c_i], flat(&t_i)).unwrap());
        let ta = g.constant(Tensor::new(&[d, c_sum], flat(&t_all)).unwrap());
        let wq = g.constant(Tensor::new(&[c_i, c_i], flat(&w_q)).unwrap());
        let wk = g.constant(Tensor::new(&[c_sum, c_sum], flat(&w_k)).unwrap());
        let wv = g.constant(Tensor::new(&[c_sum, c_sum], flat(&w_v)).unwrap());
        let ca = cct::cross_attention_head(&mut g, ti, ta, wq, wk, wv).unwrap();
        let got = g.value(ca);
        assert_eq!(got.shape(), &[c_i, d], "trial {trial}");
        for (i, row) in expected.iter().enumerate() {
            for (t, &e) in row.iter().enumerate() {
                let diff = (got.data()[i * d + t] - e).abs();
                max_diff = max_diff.max(diff);
                assert!(diff < 1e-6, "trial {trial} [{i},{t}]: {e} vs {}", got.data()[i * d + t]);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "took {secs:.1}s, budget 10s");
    println!("PASS criterion 2: 100 attention instances match the loop oracle, max |Δ| {max_diff:.2e} < 1e-6, {secs:.2}s");
}

// ── criterion 3: shape and invariant suite ─────────────────────────────────

#[test]
fn c3_shape_invariant_suite() {
    let _lock = serial();

    // token count equality across the four levels
    let cfg = ModelConfig {
        base_channels: 4,
        heads: 2,
        cct_layers: 2,
        ..Default::default()
    };
    let params = init_params::<f64>(&cfg, 64, 64, 1).unwrap();
    let mut g = Graph::new();
    let leaves = register_params(&mut g, &params, false);
    let img = g.constant(Tensor::from_fn(&[1, 64, 64], |i| (i as f64 * 0.13).sin() * 0.5));
    let enc = unet::encode(&mut g, &leaves, &cfg, img).unwrap();
    let mut counts = Vec::new();
    for level in 1..=4 {
        let t = cct::tokenize(&mut g, &leaves, &cfg, level, enc.levels[level - 1]).unwrap();
        counts.push(g.shape(t)[0]);
    }
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "token counts {counts:?}");

    // softmax rows sum to one
    let mut rng = Lcg::new(9);
    let x = g.constant(Tensor::from_fn(&[5, 7], |_| rng.signed() * 10.0));
    let sm = g.softmax(x, 1).unwrap();
    for r in 0..5 {
        let s: f64 = g.value(sm).data()[r * 7..(r + 1) * 7].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    // instance norm moments
    let x = g.constant(Tensor::from_fn(&[6, 6], |_| rng.signed() * 4.0));
    let no = g.instance_norm(x).unwrap();
    let data = g.value(no).data();
    let mean = data.iter().sum::<f64>() / 36.0;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 36.0;
    assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-3);

    // CCA mask strictly inside (0,1)
    let out = forward(&mut g, &leaves, &cfg, &Tensor::from_fn(&[1, 64, 64], |i| (i % 97) as f64 / 97.0), true).unwrap();
    assert!(!out.masks.is_empty());
    for (_, mask_var) in &out.masks {
        for &m in g.value(*mask_var).data() {
            assert!(m > 0.0 && m < 1.0, "mask value {m}");
        }
    }

    // degenerate head identities
    let t_level = g.constant(Tensor::from_fn(&[8, 4], |_| rng.signed()));
    let t_all = g.constant(Tensor::from_fn(&[8, 6], |_| rng.signed()));
    let head = (
        g.constant(Tensor::from_fn(&[4, 4], |_| rng.signed())),
        g.constant(Tensor::from_fn(&[6, 6], |_| rng.signed())),
        g.constant(Tensor::from_fn(&[6, 6], |_| rng.signed())),
    );
    let single = cct::multi_head_attention(&mut g, t_level, t_all, &[head], None).unwrap();
    let ca = cct::cross_attention_head(&mut g, t_level, t_all, head.0, head.1, head.2).unwrap();
    assert_eq!(g.value(single.0), g.value(ca), "N=1 average must be identity");
    let four = cct::multi_head_attention(&mut g, t_level, t_all, &[head; 4], None).unwrap();
    assert!(g.value(four.0).max_abs_diff(g.value(ca)) < 1e-12, "identical heads must average to one head");

    println!("PASS criterion 3: token counts {counts:?} equal, softmax/norm/CCA-mask/head-degeneracy invariants hold");
}

// ── criterion 4: overfit capability ────────────────────────────────────────

#[test]
fn c4_overfit_capability() {
    let _lock = serial();
    let start = Instant::now();
    let mut spec = ExperimentSpec::default();
    spec.model.base_channels = 8;
    spec.model.heads = 2;
    spec.model.cct_layers = 2;
    spec.synthetic_n = 8;
    spec.image_size = 64;
    spec.holdout_frac = 0.0;
    spec.train.batch_size = 2;
    spec.train.max_iterations = 200; // within the 500-iteration budget
    spec.train.seed = 42;
    spec.train.aug_hflip = false;
    spec.train.aug_vflip = false;
    spec.train.aug_rot90 = false;
    spec.out_dir = tmp("c4");
    assert_eq!(spec.train.learning_rate, 0.001);
    assert_eq!(spec.model.mode, Mode::UcTransNet);

    let out = run_single(&spec).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(
        out.train_dice > 0.95,
        "training dice {:.4} after {} iterations",
        out.train_dice,
        spec.train.max_iterations
    );
    assert!(secs < 600.0, "took {secs:.0}s, budget 600s");
    println!(
        "PASS criterion 4: training dice {:.4} > 0.95 after {} iterations at lr 0.001, {:.0}s",
        out.train_dice, spec.train.max_iterations, secs
    );
}

// ── criterion 5: skip-ablation harness fidelity ────────────────────────────

#[test]
fn c5_skip_ablation_fidelity() {
    let _lock = serial();
    let mut spec = ExperimentSpec::default();
    spec.model.mode = Mode::Plain;
    spec.model.base_channels = 8;
    spec.synthetic_n = 8;
    spec.image_size = 32;
    spec.holdout_frac = 0.25;
    spec.train.batch_size = 2;
    spec.train.max_iterations = 40;
    spec.train.seed = 11;
    spec.out_dir = tmp("c5");

    let rows = run_skip_ablation(&spec).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        vec!["all", "none", "L1", "L2", "L3", "L4", "w/o L1", "w/o L2", "w/o L3", "w/o L4"],
        "canonical configuration labels"
    );

    // 'all' must be numerically identical to a standalone plain run
    let mut single_spec = spec.clone();
    single_spec.out_dir = tmp("c5_single");
    single_spec.model.skip_mode = uctransnet::config::parse_skip_wiring("all").unwrap();
    let single = run_single(&single_spec).unwrap();
    let all_row = &rows[0];
    assert_eq!(single.row.dice.to_bits(), all_row.dice.to_bits(), "'all' dice differs from standalone run");
    assert_eq!(single.row.iou.to_bits(), all_row.iou.to_bits());

    let max = rows.iter().map(|r| r.dice).fold(f64::MIN, f64::max);
    let min = rows.iter().map(|r| r.dice).fold(f64::MAX, f64::min);
    assert!(max - min > 0.0, "wirings did not differentiate: all dice equal");
    println!(
        "PASS criterion 5: 10 canonical wirings, 'all' row identical to standalone run, dice spread {:.4}..{:.4}",
        min, max
    );
}

// ── criterion 6: metric oracles ────────────────────────────────────────────

fn oracle_counts(pred: &[bool], truth: &[bool]) -> (usize, usize, usize, usize) {
    let mut inter = 0;
    let mut union = 0;
    let mut a = 0;
    let mut b = 0;
    for (&p, &t) in pred.iter().zip(truth) {
        if p && t {
            inter += 1;
        }
        if p || t {
            union += 1;
        }
        if p {
            a += 1;
        }
        if t {
            b += 1;
        }
    }
    (inter, union, a, b)
}

/// Brute-force Hausdorff: every boundary pixel against every other, no early
/// exits. Boundary = foreground pixel with a non-foreground 4-neighbor or on
/// the border.
fn oracle_hausdorff(pred: &[bool], truth: &[bool], n: usize) -> Option<f64> {
    let boundary = |m: &[bool]| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for y in 0..n {
            for x in 0..n {
                if !m[y * n + x] {
                    continue;
                }
                let edge = y == 0 || y == n - 1 || x == 0 || x == n - 1;
                let hole = (y > 0 && !m[(y - 1) * n + x])
                    || (y + 1 < n && !m[(y + 1) * n + x])
                    || (x > 0 && !m[y * n + x - 1])
                    || (x + 1 < n && !m[y * n + x + 1]);
                if edge || hole {
                    out.push((y as f64, x as f64));
                }
            }
        }
        out
    };
    let pa = boundary(pred);
    let pb = boundary(truth);
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> f64 {
        from.iter()
            .map(|&(ay, ax)| {
                to.iter()
                    .map(|&(by, bx)| ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    Some(f64::max(directed(&pa, &pb), directed(&pb, &pa)))
}

#[test]
fn c6_metric_oracles() {
    let _lock = serial();
    let mut rng = Lcg::new(31);
    let n = 16;
    let mut hausdorff_checked = 0;
    for trial in 0..100 {
        let density_p = 0.2 + 0.6 * rng.unit();
        let density_t = 0.2 + 0.6 * rng.unit();
        let pred: Vec<bool> = (0..n * n).map(|_| rng.unit() < density_p).collect();
        let truth: Vec<bool> = (0..n * n).map(|_| rng.unit() < density_t).collect();

        let (inter, union, a, b) = oracle_counts(&pred, &truth);
        let expect_dice = if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 };
        let expect_iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let d = metrics::dice(&pred, &truth);
        let j = metrics::iou(&pred, &truth);
        assert!((d - expect_dice).abs() < 1e-9, "trial {trial} dice");
        assert!((j - expect_iou).abs() < 1e-9, "trial {trial} iou");
        assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-9, "trial {trial} identity");

        match (oracle_hausdorff(&pred, &truth, n), metrics::hausdorff(&pred, &truth, n, n)) {
            (Some(expect), Ok(got)) => {
                assert!((got - expect).abs() < 1e-9, "trial {trial} hausdorff {got} vs {expect}");
                hausdorff_checked += 1;
            }
            (None, Err(Error::UndefinedMetric(_))) => {}
            (o, g) => panic!("trial {trial}: oracle {o:?} vs impl {g:?}"),
        }
    }
    assert!(hausdorff_checked >= 90, "only {hausdorff_checked} hausdorff comparisons ran");
    println!("PASS criterion 6: dice/iou/hausdorff match oracles on 100 mask pairs ({hausdorff_checked} HD comparisons), identity holds to 1e-9");
}

// ── criterion 7: checkpoint persistence ────────────────────────────────────

#[test]
fn c7_persistence() {
    let _lock = serial();
    let cfg = ModelConfig {
        base_channels: 4,
        heads: 2,
        cct_layers: 2,
        ..Default::default()
    };
    let params = init_params::<f32>(&cfg, 32, 32, 5).unwrap();
    let dir = tmp("c7");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.uctn");
    save_checkpoint(&params, Some(&cfg), &path).unwrap();

    let loaded = load_checkpoint(&path).unwrap().param_store::<f32>();
    assert_eq!(loaded.len(), params.len());
    for ((na, ta), (nb, tb)) in params.iter().zip(loaded.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb, "tensor '{na}' not bitwise identical");
    }

    let good = std::fs::read(&path).unwrap();
    let corrupt = |bytes: Vec<u8>, name: &str| -> Error {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        load_checkpoint(&p).unwrap_err()
    };

    let mut bad_magic = good.clone();
    bad_magic[1] = b'!';
    let e1 = corrupt(bad_magic, "magic.uctn");
    assert!(matches!(e1, Error::Checkpoint(CheckpointError::BadMagic)), "{e1}");

    let mut bad_version = good.clone();
    bad_version[4] = 9;
    let crc = uctransnet::crc::crc32(&bad_version[..bad_version.len() - 4]);
    let len = bad_version.len();
    bad_version[len - 4..].copy_from_slice(&crc.to_le_bytes());
    let e2 = corrupt(bad_version, "version.uctn");
    assert!(
        matches!(e2, Error::Checkpoint(CheckpointError::UnsupportedVersion(9))),
        "{e2}"
    );

    let e3 = corrupt(good[..good.len() - 100].to_vec(), "trunc.uctn");
    assert!(matches!(e3, Error::Checkpoint(CheckpointError::BadCrc { .. })), "{e3}");

    println!("PASS criterion 7: round-trip bitwise identical; magic/version/CRC corruption raise three distinct typed errors");
}

// ── criterion 8: rerun determinism through the binary ──────────────────────

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uctransnet"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// CSV bytes with the timestamp comment line excluded.
fn stable_csv(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines()
        .filter(|l| !l.starts_with("# generated"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn assert_dir_outputs_match(a: &Path, b: &Path) {
    let mut names: Vec<String> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut names_b: Vec<String> = std::fs::read_dir(b)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names_b.sort();
    assert_eq!(names, names_b, "output file sets differ");
    for name in &names {
        let (pa, pb) = (a.join(name), b.join(name));
        if name.ends_with(".csv") {
            assert_eq!(stable_csv(&pa), stable_csv(&pb), "{name} differs between reruns");
        } else {
            assert_eq!(
                std::fs::read(&pa).unwrap(),
                std::fs::read(&pb).unwrap(),
                "{name} differs between reruns"
            );
        }
    }
}

#[test]
fn c8_rerun_determinism() {
    let _lock = serial();
    let tiny: Vec<String> = [
        "image_size=32",
        "base_channels=2",
        "heads=2",
        "cct_layers=1",
        "synthetic_n=4",
        "iterations=2",
        "batch_size=2",
        "seed=123",
    ]
    .iter()
    .flat_map(|kv| ["--set".to_string(), kv.to_string()])
    .collect();

    // train
    let (t1, t2) = (tmp("c8_train1"), tmp("c8_train2"));
    for out in [&t1, &t2] {
        run_ok(bin().arg("train").args(&tiny).arg("--out").arg(out));
    }
    assert_dir_outputs_match(&t1, &t2);

    // eval of the same checkpoint
    let (e1, e2) = (tmp("c8_eval1"), tmp("c8_eval2"));
    for out in [&e1, &e2] {
        run_ok(
            bin()
                .arg("eval")
                .args(&tiny)
                .arg("--checkpoint")
                .arg(t1.join("model.uctn"))
                .arg("--out")
                .arg(out),
        );
    }
    assert_dir_outputs_match(&e1, &e2);

    // gen-data
    let (d1, d2) = (tmp("c8_data1"), tmp("c8_data2"));
    for dir in [&d1, &d2] {
        run_ok(bin().arg("gen-data").args(&tiny).arg("--dir").arg(dir));
    }
    assert_dir_outputs_match(&d1, &d2);

    // ablate-skip
    let (s1, s2) = (tmp("c8_skip1"), tmp("c8_skip2"));
    for out in [&s1, &s2] {
        run_ok(bin().arg("ablate-skip").args(&tiny).arg("--out").arg(out));
    }
    assert_dir_outputs_match(&s1, &s2);

    // ablate-qk
    let (q1, q2) = (tmp("c8_qk1"), tmp("c8_qk2"));
    for out in [&q1, &q2] {
        run_ok(bin().arg("ablate-qk").args(&tiny).arg("--out").arg(out));
    }
    assert_dir_outputs_match(&q1, &q2);

    // gradcheck
    let (g1, g2) = (tmp("c8_gc1"), tmp("c8_gc2"));
    for out in [&g1, &g2] {
        run_ok(bin().arg("gradcheck").arg("--samples").arg("16").arg("--out").arg(out));
    }
    assert_dir_outputs_match(&g1, &g2);

    // export-attn with fresh seed-pinned weights
    let (a1, a2) = (tmp("c8_attn1"), tmp("c8_attn2"));
    for out in [&a1, &a2] {
        run_ok(bin().arg("export-attn").args(&tiny).arg("--out").arg(out));
    }
    assert_dir_outputs_match(&a1, &a2);

    println!("PASS criterion 8: train/eval/gen-data/ablate-skip/ablate-qk/gradcheck/export-attn reruns byte-identical (timestamp line excluded)");
}

// ── criterion 9: pretrained strategy ───────────────────────────────────────

#[test]
fn c9_pretrained_strategy() {
    let _lock = serial();

    // phase 1: train a plain U-Net and save it
    let mut unet_spec = ExperimentSpec::default();
    unet_spec.model.mode = Mode::Plain;
    unet_spec.model.base_channels = 4;
    unet_spec.model.heads = 2;
    unet_spec.model.cct_layers = 2;
    unet_spec.synthetic_n = 6;
    unet_spec.image_size = 32;
    unet_spec.holdout_frac = 0.0;
    unet_spec.train.batch_size = 2;
    unet_spec.train.max_iterations = 10;
    unet_spec.train.seed = 21;
    unet_spec.out_dir = tmp("c9_unet");
    let unet_run = run_single(&unet_spec).unwrap();

    let ckpt = load_checkpoint(&unet_run.checkpoint).unwrap();
    let unet_tensor_count = ckpt.param_entries().count();
    assert!(ckpt.param_entries().all(|(n, _)| n.starts_with("unet.")));

    // phase 2: transfer into the full model
    let full_model = ModelConfig {
        mode: Mode::UcTransNet,
        ..unet_spec.model.clone()
    };
    let mut params = init_params::<f32>(&full_model, 32, 32, 99).unwrap();
    let before: Vec<(String, Tensor<f32>)> = params
        .iter()
        .filter(|(n, _)| n.starts_with("cct.") || n.starts_with("cca"))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    assert!(!before.is_empty());

    let report = load_pretrained_unet(&mut params, &ckpt).unwrap();
    assert_eq!(
        report.matched, unet_tensor_count,
        "matched count must equal the U-Net checkpoint's tensor count"
    );
    assert!(report.skipped.is_empty());
    for (name, original) in &before {
        assert_eq!(
            params.get(name).unwrap(),
            original,
            "CTrans tensor '{name}' must stay untouched"
        );
    }
    // and the transferred tensors really come from the checkpoint
    let moved = ckpt
        .entries
        .iter()
        .find(|(n, _)| n == "unet.enc1.conv1.weight")
        .unwrap();
    assert_eq!(params.get("unet.enc1.conv1.weight").unwrap(), &moved.1.cast::<f32>());

    // phase 3: resume training for 100 iterations without NaN
    let tc = uctransnet::config::TrainConfig {
        max_iterations: 100,
        batch_size: 2,
        seed: 22,
        ..Default::default()
    };
    let corpus = generate_synthetic(6, 32, unet_spec.data_seed);
    let result = fit(&mut params, &full_model, &tc, &corpus, &[]).unwrap();
    assert_eq!(result.curve.len(), 100);
    assert!(result.curve.iter().all(|p| p.total.is_finite()));

    println!(
        "PASS criterion 9: {} U-Net tensors transferred, {} CTrans tensors untouched, 100 further iterations finite",
        report.matched,
        before.len()
    );
}
