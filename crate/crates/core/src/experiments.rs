//! Experiment runners behind the CLI: single train/eval runs, the
//! skip-wiring and query/key ablation sweeps, finite-difference gradient
//! checking, and attention export.
//!
//! Every CSV starts with a `# spec_hash` provenance line and a `# generated`
//! timestamp line; reruns with the same spec and seed reproduce all outputs
//! byte-for-byte apart from the timestamp.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, ExperimentSpec, Mode, ModelConfig};
use crate::data::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::synthetic::generate_synthetic;
use crate::data::{load_dataset, split_indices, LoadOptions, SegmentationSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{forward, init_params, register_params, ParamStore};
use crate::par::map_ordered;
use crate::tensor::{Dtype, Graph, Scalar};
use crate::train::{fit, loss::combined_loss, mean_dice, predict_all, CurvePoint, FitResult};

/// One result line of an ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub dice: f64,
    pub iou: f64,
    pub hausdorff: Option<f64>,
    pub iterations: usize,
    pub seed: u64,
}

pub struct SingleRunOutput {
    pub row: AblationRow,
    pub report: MetricsReport,
    pub train_dice: f64,
    pub curve: Vec<CurvePoint>,
    pub total_params: usize,
    pub checkpoint: PathBuf,
    pub pretrain_matched: Option<usize>,
}

// ── corpus handling ────────────────────────────────────────────────────────

pub fn load_corpus(spec: &ExperimentSpec) -> Result<Vec<SegmentationSample>> {
    let samples = match &spec.source {
        DataSource::Synthetic => generate_synthetic(spec.synthetic_n, spec.image_size, spec.data_seed),
        DataSource::Dir(dir) => load_dataset(
            dir,
            LoadOptions {
                num_classes: spec.model.num_classes,
                binarize: spec.binarize,
            },
        )?,
    };
    if samples.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let (c, h, w) = (samples[0].channels, samples[0].height, samples[0].width);
    if let Some(bad) = samples.iter().find(|s| (s.channels, s.height, s.width) != (c, h, w)) {
        return Err(Error::Data(format!(
            "sample '{}' has {}x{}x{}, expected uniform {}x{}x{}",
            bad.id, bad.channels, bad.height, bad.width, c, h, w
        )));
    }
    if c != spec.model.in_channels {
        return Err(Error::Config(format!(
            "model expects {} input channels, dataset has {c}",
            spec.model.in_channels
        )));
    }
    Ok(samples)
}

// ── CSV plumbing ───────────────────────────────────────────────────────────

fn provenance(spec: &ExperimentSpec) -> String {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("# spec_hash: {:#010x}\n# generated: {now}\n", spec.hash())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn rows_to_csv(spec: &ExperimentSpec, rows: &[AblationRow]) -> String {
    let mut s = provenance(spec);
    s.push_str("config_label,dice,iou,hd,iterations,seed\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6},{},{},{}",
            r.label,
            r.dice,
            r.iou,
            fmt_opt(r.hausdorff),
            r.iterations,
            r.seed
        )
        .unwrap();
    }
    s
}

fn curve_to_csv(spec: &ExperimentSpec, curve: &[CurvePoint]) -> String {
    let mut s = provenance(spec);
    s.push_str("iteration,loss_total,loss_ce,loss_dice\n");
    for p in curve {
        writeln!(s, "{},{:.9},{:.9},{:.9}", p.iteration, p.total, p.ce, p.dice).unwrap();
    }
    s
}

// ── shared train/eval pipeline ─────────────────────────────────────────────

struct TrainedRun<T: Scalar> {
    params: ParamStore<T>,
    result: FitResult,
    report: MetricsReport,
    train_dice: f64,
    row: AblationRow,
}

fn train_and_eval<T: Scalar>(
    spec: &ExperimentSpec,
    model: &ModelConfig,
    label: &str,
    corpus: &[SegmentationSample],
) -> Result<TrainedRun<T>> {
    let (train_idx, val_idx) = split_indices(corpus.len(), spec.holdout_frac);
    let train_set: Vec<SegmentationSample> = train_idx.iter().map(|&i| corpus[i].clone()).collect();
    let val_set: Vec<SegmentationSample> = val_idx.iter().map(|&i| corpus[i].clone()).collect();

    let (h, w) = (spec.image_size, spec.image_size);
    let mut params = init_params::<T>(model, h, w, spec.train.seed)?;
    let result = fit(&mut params, model, &spec.train, &train_set, &val_set)?;

    let preds = predict_all(&params, model, &val_set)?;
    let truths: Vec<Vec<u8>> = val_set.iter().map(|s| s.mask.clone()).collect();
    let dims: Vec<(usize, usize)> = val_set.iter().map(|s| (s.height, s.width)).collect();
    let report = evaluate(&preds, &truths, &dims, model.num_classes);
    let train_dice = mean_dice(&params, model, &train_set)?;

    let row = AblationRow {
        label: label.to_string(),
        dice: report.mean_dice,
        iou: report.mean_iou,
        hausdorff: report.mean_hausdorff,
        iterations: spec.train.max_iterations,
        seed: spec.train.seed,
    };
    Ok(TrainedRun {
        params,
        result,
        report,
        train_dice,
        row,
    })
}

// ── single run ─────────────────────────────────────────────────────────────

fn run_single_typed<T: Scalar>(spec: &ExperimentSpec) -> Result<SingleRunOutput> {
    let corpus = load_corpus(spec)?;
    let run = train_and_eval::<T>(spec, &spec.model, "single", &corpus)?;

    let out = &spec.out_dir;
    write_file(&out.join("spec.conf"), &spec.canonical())?;
    write_file(&out.join("loss.csv"), &curve_to_csv(spec, &run.result.curve))?;
    write_file(&out.join("report.csv"), &rows_to_csv(spec, std::slice::from_ref(&run.row)))?;
    let mut metrics_csv = provenance(spec);
    metrics_csv.push_str(&run.report.to_csv());
    write_file(&out.join("metrics.csv"), &metrics_csv)?;
    let checkpoint = out.join("model.uctn");
    save_checkpoint(&run.params, Some(&spec.model), &checkpoint)?;

    Ok(SingleRunOutput {
        row: run.row,
        report: run.report,
        train_dice: run.train_dice,
        curve: run.result.curve,
        total_params: run.params.total_scalars(),
        checkpoint,
        pretrain_matched: run.result.pretrain.map(|p| p.matched),
    })
}

pub fn run_single(spec: &ExperimentSpec) -> Result<SingleRunOutput> {
    spec.validate()?;
    match spec.model.dtype {
        Dtype::F32 => run_single_typed::<f32>(spec),
        Dtype::F64 => run_single_typed::<f64>(spec),
    }
}

// ── skip ablation ──────────────────────────────────────────────────────────

/// The ten canonical wirings: original U-Net, no skips, keep-one, drop-one.
pub fn skip_ablation_labels() -> Vec<(String, [crate::config::SkipMode; 4])> {
    use crate::config::parse_skip_wiring as parse;
    let mut out = vec![
        ("all".to_string(), parse("all").unwrap()),
        ("none".to_string(), parse("none").unwrap()),
    ];
    for l in 1..=4 {
        out.push((format!("L{l}"), parse(&format!("L{l}")).unwrap()));
    }
    for l in 1..=4 {
        out.push((format!("w/o L{l}"), parse(&format!("wo_L{l}")).unwrap()));
    }
    out
}

fn run_skip_ablation_typed<T: Scalar>(spec: &ExperimentSpec) -> Result<Vec<AblationRow>> {
    let corpus = load_corpus(spec)?;
    let jobs = skip_ablation_labels();
    let results = map_ordered(jobs, |(label, wiring)| {
        let model = ModelConfig {
            mode: Mode::Plain,
            skip_mode: wiring,
            ..spec.model.clone()
        };
        train_and_eval::<T>(spec, &model, &label, &corpus).map(|r| r.row)
    });
    let rows: Result<Vec<AblationRow>> = results.into_iter().collect();
    let rows = rows?;
    write_file(&spec.out_dir.join("skip_ablation.csv"), &rows_to_csv(spec, &rows))?;
    Ok(rows)
}

pub fn run_skip_ablation(spec: &ExperimentSpec) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    match spec.model.dtype {
        Dtype::F32 => run_skip_ablation_typed::<f32>(spec),
        Dtype::F64 => run_skip_ablation_typed::<f64>(spec),
    }
}

// ── query/key ablation ─────────────────────────────────────────────────────

/// Parse a sweep label: `Q…` fixes the key set to all four levels and varies
/// the queries, `K…` does the opposite.
pub fn parse_qk_label(label: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let (kind, digits) = label.split_at(1);
    let levels: Vec<usize> = digits
        .chars()
        .map(|c| {
            c.to_digit(10)
                .filter(|d| (1..=4).contains(d))
                .map(|d| d as usize)
                .ok_or_else(|| Error::Config(format!("bad level '{c}' in sweep label '{label}'")))
        })
        .collect::<Result<_>>()?;
    if levels.is_empty() {
        return Err(Error::Config(format!("empty level set in sweep label '{label}'")));
    }
    let all = vec![1, 2, 3, 4];
    match kind {
        "Q" => Ok((levels, all)),
        "K" => Ok((all, levels)),
        _ => Err(Error::Config(format!(
            "sweep label '{label}' must start with Q or K"
        ))),
    }
}

fn run_qk_ablation_typed<T: Scalar>(spec: &ExperimentSpec) -> Result<Vec<AblationRow>> {
    let corpus = load_corpus(spec)?;
    let jobs: Vec<(String, Vec<usize>, Vec<usize>)> = spec
        .qk_sweep
        .iter()
        .map(|label| parse_qk_label(label).map(|(q, k)| (label.clone(), q, k)))
        .collect::<Result<_>>()?;
    let results = map_ordered(jobs, |(label, query_levels, key_levels)| {
        let model = ModelConfig {
            mode: Mode::UcTransNet,
            query_levels,
            key_levels,
            ..spec.model.clone()
        };
        train_and_eval::<T>(spec, &model, &label, &corpus).map(|r| r.row)
    });
    let rows: Result<Vec<AblationRow>> = results.into_iter().collect();
    let rows = rows?;
    write_file(&spec.out_dir.join("qk_ablation.csv"), &rows_to_csv(spec, &rows))?;
    Ok(rows)
}

pub fn run_qk_ablation(spec: &ExperimentSpec) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    match spec.model.dtype {
        Dtype::F32 => run_qk_ablation_typed::<f32>(spec),
        Dtype::F64 => run_qk_ablation_typed::<f64>(spec),
    }
}

// ── evaluation of a stored checkpoint ──────────────────────────────────────

pub fn run_eval(spec: &ExperimentSpec, checkpoint: &Path) -> Result<MetricsReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model_config().unwrap_or_else(|| spec.model.clone());
    let corpus = load_corpus(spec)?;
    let report = match model.dtype {
        Dtype::F32 => eval_typed::<f32>(&ckpt, &model, &corpus)?,
        Dtype::F64 => eval_typed::<f64>(&ckpt, &model, &corpus)?,
    };
    let mut csv = provenance(spec);
    csv.push_str(&report.to_csv());
    write_file(&spec.out_dir.join("eval_report.csv"), &csv)?;
    Ok(report)
}

fn eval_typed<T: Scalar>(
    ckpt: &crate::data::checkpoint::Checkpoint,
    model: &ModelConfig,
    corpus: &[SegmentationSample],
) -> Result<MetricsReport> {
    let params = ckpt.param_store::<T>();
    let preds = predict_all(&params, model, corpus)?;
    let truths: Vec<Vec<u8>> = corpus.iter().map(|s| s.mask.clone()).collect();
    let dims: Vec<(usize, usize)> = corpus.iter().map(|s| (s.height, s.width)).collect();
    Ok(evaluate(&preds, &truths, &dims, model.num_classes))
}

// ── gradient check ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub param: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub threshold: f64,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn pretty(&self) -> String {
        let mut s = format!(
            "gradcheck: {} coordinates, max rel error {:.3e} at '{}' (threshold {:.0e}) → {}\n",
            self.checked,
            self.max_rel_error,
            self.worst_param,
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        for f in &self.failures {
            writeln!(
                s,
                "  FAIL {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                f.param, f.element, f.analytic, f.numeric, f.rel_error
            )
            .unwrap();
        }
        s
    }
}

pub const GRADCHECK_TOL: f64 = 1e-4;
/// Step for the full-model check. Smaller than the per-primitive tests'
/// 1e-5: activations normalized to zero mean put many ReLU inputs near the
/// kink, and a wide stencil steps across it, polluting the quotient. f64
/// roundoff at 1e-7 is still ~1e-9 absolute, far below the tolerance.
const GRADCHECK_H: f64 = 1e-7;

/// Central-difference check of the full-model loss gradient on at least
/// `min_coords` sampled parameters, always in f64. `corrupt` is a fault
/// injection hook: the named parameter's analytic gradient is perturbed so
/// the report must fail naming it.
pub fn run_gradcheck(
    spec: &ExperimentSpec,
    min_coords: usize,
    corrupt: Option<&str>,
) -> Result<GradCheckReport> {
    let model = ModelConfig {
        dtype: Dtype::F64,
        ..spec.model.clone()
    };
    let size = spec.image_size;
    model.validate(size, size)?;
    let sample = generate_synthetic(1, size, spec.data_seed).pop().expect("one sample");

    let params = init_params::<f64>(&model, size, size, spec.train.seed)?;
    let tc = &spec.train;

    let eval_loss = |params: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new().with_finite_checks(true);
        let leaves = register_params(&mut g, params, false);
        let out = forward(&mut g, &leaves, &model, &sample.image_tensor::<f64>(), false)?;
        let terms = combined_loss(&mut g, out.logits, &sample.mask, tc.w_ce, tc.w_dice, tc.dice_include_background)?;
        Ok(g.value(terms.total).item())
    };

    // analytic gradients, one backward sweep
    let mut g = Graph::new().with_finite_checks(true);
    let leaves = register_params(&mut g, &params, true);
    let out = forward(&mut g, &leaves, &model, &sample.image_tensor::<f64>(), false)?;
    let terms = combined_loss(&mut g, out.logits, &sample.mask, tc.w_ce, tc.w_dice, tc.dice_include_background)?;
    let grads = g.backward(terms.total)?;
    let mut analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|i| {
            let var = leaves.var(params.name_at(i));
            match grads.get(var) {
                Some(s) => s.to_vec(),
                None => vec![0.0; params.tensor_at(i).len()],
            }
        })
        .collect();

    // flat coordinate → (tensor, element)
    let mut bounds = Vec::with_capacity(params.len());
    let mut acc = 0;
    for i in 0..params.len() {
        bounds.push(acc);
        acc += params.tensor_at(i).len();
    }

    // sample distinct coordinates uniformly over all scalars
    let total: usize = params.total_scalars();
    let n_coords = min_coords.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x6772_6164);
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < n_coords {
        seen.insert(rng.gen_range(0..total));
    }

    if let Some(name) = corrupt {
        let idx = (0..params.len())
            .find(|&i| params.name_at(i) == name)
            .ok_or_else(|| Error::Config(format!("corrupt hook: unknown parameter '{name}'")))?;
        analytic[idx][0] += 0.5;
        // the fault must land on a checked coordinate
        seen.insert(bounds[idx]);
    }
    let locate = |flat: usize| -> (usize, usize) {
        let ti = bounds.partition_point(|&b| b <= flat) - 1;
        (ti, flat - bounds[ti])
    };

    let coords: Vec<(usize, usize)> = seen.iter().map(|&f| locate(f)).collect();
    let checks = map_ordered(coords, |(ti, ei)| -> Result<(usize, usize, f64, f64)> {
        let mut plus = params.clone();
        plus.tensor_at_mut(ti).data_mut()[ei] += GRADCHECK_H;
        let mut minus = params.clone();
        minus.tensor_at_mut(ti).data_mut()[ei] -= GRADCHECK_H;
        let numeric = (eval_loss(&plus)? - eval_loss(&minus)?) / (2.0 * GRADCHECK_H);
        Ok((ti, ei, analytic[ti][ei], numeric))
    });

    let mut report = GradCheckReport {
        checked: n_coords,
        threshold: GRADCHECK_TOL,
        max_rel_error: 0.0,
        worst_param: String::new(),
        failures: Vec::new(),
    };
    for c in checks {
        let (ti, ei, a, numeric) = c?;
        let rel = (a - numeric).abs() / f64::max(1e-6, f64::max(a.abs(), numeric.abs()));
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = format!("{}[{}]", params.name_at(ti), ei);
        }
        if rel > GRADCHECK_TOL {
            report.failures.push(GradCheckFailure {
                param: params.name_at(ti).to_string(),
                element: ei,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    let mut csv = provenance(spec);
    csv.push_str("checked,max_rel_error,worst_param,failures,threshold\n");
    writeln!(
        csv,
        "{},{:.9e},{},{},{:.0e}",
        report.checked,
        report.max_rel_error,
        report.worst_param,
        report.failures.len(),
        report.threshold
    )
    .unwrap();
    write_file(&spec.out_dir.join("gradcheck.csv"), &csv)?;
    Ok(report)
}

// ── attention export ───────────────────────────────────────────────────────

pub struct AttentionExport {
    /// Per query level: |similarity| averaged over heads and layers, C_i×C_Σ.
    pub per_level: Vec<(usize, Vec<Vec<f64>>)>,
    /// 4×4 block means over (query level × key level); None where absent.
    pub summary: [[Option<f64>; 4]; 4],
    /// Raw post-softmax matrices (level, layer, head, rows of the matrix).
    pub raw: Vec<(usize, usize, usize, Vec<Vec<f64>>)>,
    /// CCA channel masks per ctrans level.
    pub masks: Vec<(usize, Vec<f64>)>,
}

fn export_attention_typed<T: Scalar>(
    spec: &ExperimentSpec,
    model: &ModelConfig,
    params: &ParamStore<T>,
) -> Result<AttentionExport> {
    let corpus = load_corpus(spec)?;
    let sample = &corpus[0];

    let mut g = Graph::new();
    let leaves = register_params(&mut g, params, false);
    let out = forward(&mut g, &leaves, model, &sample.image_tensor::<T>(), true)?;

    let mut raw = Vec::new();
    for rec in &out.sims {
        let t = g.value(rec.var);
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let m: Vec<Vec<f64>> = (0..rows)
            .map(|r| t.data()[r * cols..(r + 1) * cols].iter().map(|v| v.to_f64_val()).collect())
            .collect();
        raw.push((rec.level, rec.layer, rec.head, m));
    }

    // average |M| over layers and heads per level
    let mut per_level = Vec::new();
    for &level in &model.query_levels {
        let mats: Vec<&Vec<Vec<f64>>> = raw
            .iter()
            .filter(|(l, _, _, _)| *l == level)
            .map(|(_, _, _, m)| m)
            .collect();
        if mats.is_empty() {
            continue;
        }
        let (rows, cols) = (mats[0].len(), mats[0][0].len());
        let mut avg = vec![vec![0.0f64; cols]; rows];
        for m in &mats {
            for r in 0..rows {
                for c in 0..cols {
                    avg[r][c] += m[r][c].abs();
                }
            }
        }
        let inv = 1.0 / mats.len() as f64;
        for row in avg.iter_mut() {
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        per_level.push((level, avg));
    }

    // block means over the query level × key level grid
    let ch = model.channels();
    let mut summary = [[None; 4]; 4];
    for (level, avg) in &per_level {
        let mut col = 0usize;
        for &kl in &model.key_levels {
            let width = ch[kl - 1];
            let block: f64 = avg.iter().map(|row| row[col..col + width].iter().sum::<f64>()).sum();
            let count = (avg.len() * width) as f64;
            summary[*level - 1][kl - 1] = Some(block / count);
            col += width;
        }
    }

    let masks = out
        .masks
        .iter()
        .map(|(level, var)| {
            (
                *level,
                g.value(*var).data().iter().map(|v| v.to_f64_val()).collect(),
            )
        })
        .collect();

    Ok(AttentionExport {
        per_level,
        summary,
        raw,
        masks,
    })
}

/// Run one traced forward pass (checkpoint weights when given, fresh
/// seed-pinned weights otherwise) and write the similarity CSVs:
/// `attn_level{i}.csv`, `attn_summary.csv` and `cca_masks.csv`.
pub fn export_attention(spec: &ExperimentSpec, checkpoint: Option<&Path>) -> Result<AttentionExport> {
    spec.validate()?;
    let (model, export) = match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let model = ckpt.model_config().unwrap_or_else(|| spec.model.clone());
            let export = match model.dtype {
                Dtype::F32 => {
                    let params = ckpt.param_store::<f32>();
                    export_attention_typed(spec, &model, &params)?
                }
                Dtype::F64 => {
                    let params = ckpt.param_store::<f64>();
                    export_attention_typed(spec, &model, &params)?
                }
            };
            (model, export)
        }
        None => {
            let model = spec.model.clone();
            let size = spec.image_size;
            let export = match model.dtype {
                Dtype::F32 => {
                    let params = init_params::<f32>(&model, size, size, spec.train.seed)?;
                    export_attention_typed(spec, &model, &params)?
                }
                Dtype::F64 => {
                    let params = init_params::<f64>(&model, size, size, spec.train.seed)?;
                    export_attention_typed(spec, &model, &params)?
                }
            };
            (model, export)
        }
    };
    let _ = model;

    for (level, avg) in &export.per_level {
        let mut csv = provenance(spec);
        csv.push_str("query_channel,key_channels...\n");
        for (r, row) in avg.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(csv, "{r},{}", cells.join(",")).unwrap();
        }
        write_file(&spec.out_dir.join(format!("attn_level{level}.csv")), &csv)?;
    }

    let mut csv = provenance(spec);
    csv.push_str("query_level,K1,K2,K3,K4\n");
    for q in 1..=4 {
        let cells: Vec<String> = (1..=4)
            .map(|k| export.summary[q - 1][k - 1].map(|v| format!("{v:.6}")).unwrap_or_default())
            .collect();
        writeln!(csv, "Q{q},{}", cells.join(",")).unwrap();
    }
    write_file(&spec.out_dir.join("attn_summary.csv"), &csv)?;

    let mut csv = provenance(spec);
    csv.push_str("level,channel,mask\n");
    for (level, mask) in &export.masks {
        for (c, v) in mask.iter().enumerate() {
            writeln!(csv, "{level},{c},{v:.6}").unwrap();
        }
    }
    write_file(&spec.out_dir.join("cca_masks.csv"), &csv)?;

    Ok(export)
}

/// Generate a synthetic corpus on disk (paired PGM files).
pub fn run_gen_data(spec: &ExperimentSpec, dir: &Path) -> Result<usize> {
    let samples = generate_synthetic(spec.synthetic_n, spec.image_size, spec.data_seed);
    crate::data::write_dataset(dir, &samples)?;
    Ok(samples.len())
}
