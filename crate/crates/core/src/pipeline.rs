//! Stage orchestration: each stage consumes and produces documented file
//! artifacts under the output directory so runs can be resumed stage by
//! stage, and `run_all` chains them end to end.
//!
//! Artifacts:
//!   scene.bsr / truth.msk     synthetic scene (synth stage)
//!   splits.tsv, norm_stats.tsv  features stage
//!   pretrained.mdl            encoders + fresh head (pretrain stage)
//!   model.mdl, history.csv, engines.kv  finetune stage
//!   pred.msk                  predict stage
//!   building.msk              postprocess stage
//!   metrics.kv, metrics.txt   evaluate stage

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::features::{self, NormStats, PatchDataset, SplitAssignment};
use crate::metrics::{self, Scores};
use crate::model_io::{self, ModelMeta};
use crate::nn::{self, MlpModel};
use crate::postprocess;
use crate::raster::{self, BandStack, LabelMask};
use crate::synth;
use crate::targets::{self, EngineKind, ExtendedTargets, LossKind, TargetPayload};

pub const SCENE_FILE: &str = "scene.bsr";
pub const TRUTH_FILE: &str = "truth.msk";
pub const SPLITS_FILE: &str = "splits.tsv";
pub const NORM_FILE: &str = "norm_stats.tsv";
pub const PRETRAINED_FILE: &str = "pretrained.mdl";
pub const MODEL_FILE: &str = "model.mdl";
pub const HISTORY_FILE: &str = "history.csv";
pub const ENGINES_FILE: &str = "engines.kv";
pub const PRED_FILE: &str = "pred.msk";
pub const BUILDING_FILE: &str = "building.msk";
pub const METRICS_KV_FILE: &str = "metrics.kv";
pub const METRICS_TXT_FILE: &str = "metrics.txt";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Features,
    Pretrain,
    Finetune,
    Predict,
    Postprocess,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Features => "features",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Predict => "predict",
            Stage::Postprocess => "postprocess",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// Holds the per-directory lock for the lifetime of a run.
#[derive(Debug)]
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<LockGuard> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(path))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn artifact(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, stage })
    }
}

/// The machine-readable metrics report plus its human-readable table.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub entries: BTreeMap<String, String>,
    pub table: String,
}

impl RunReport {
    pub fn kv_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            writeln!(out, "{k} {v}").unwrap();
        }
        out
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.entries.get(key).and_then(|v| v.parse().ok())
    }

    pub fn from_kv_text(text: &str) -> RunReport {
        let mut entries = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once(' ') {
                entries.insert(k.to_string(), v.to_string());
            }
        }
        RunReport {
            entries,
            table: String::new(),
        }
    }
}

// ---------------------------------------------------------------------
// stage entry points
// ---------------------------------------------------------------------

pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<Option<RunReport>> {
    cfg.validate()?;
    let _lock = LockGuard::acquire(&cfg.output_dir)?;
    let run = || -> Result<Option<RunReport>> {
        match stage {
            Stage::Synth => synth_inner(cfg).map(|_| None),
            Stage::Features => features_inner(cfg).map(|_| None),
            Stage::Pretrain => pretrain_inner(cfg).map(|_| None),
            Stage::Finetune => finetune_inner(cfg).map(|_| None),
            Stage::Predict => predict_inner(cfg).map(|_| None),
            Stage::Postprocess => postprocess_inner(cfg).map(|_| None),
            Stage::Evaluate => evaluate_inner(cfg).map(Some),
        }
    };
    run().map_err(|e| e.in_stage(stage.name()))
}

/// The whole pipeline: features → pretrain → finetune → predict →
/// postprocess → evaluate, sharing one lock. Identical artifacts to running
/// the stages one by one.
pub fn run_all(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let _lock = LockGuard::acquire(&cfg.output_dir)?;
    let started = Instant::now();
    features_inner(cfg).map_err(|e| e.in_stage("features"))?;
    pretrain_inner(cfg).map_err(|e| e.in_stage("pretrain"))?;
    finetune_inner(cfg).map_err(|e| e.in_stage("finetune"))?;
    predict_inner(cfg).map_err(|e| e.in_stage("predict"))?;
    postprocess_inner(cfg).map_err(|e| e.in_stage("postprocess"))?;
    let report = evaluate_inner(cfg).map_err(|e| e.in_stage("evaluate"))?;
    // wall-clock summary and engine diagnostics live outside the metrics
    // report so reports stay byte-identical across reruns
    let mut summary = String::new();
    writeln!(summary, "loss {}", cfg.finetune.loss).unwrap();
    writeln!(summary, "seed {}", cfg.seed).unwrap();
    writeln!(summary, "elapsed_seconds {:.3}", started.elapsed().as_secs_f64()).unwrap();
    if let Ok(engines) = fs::read_to_string(artifact(cfg, ENGINES_FILE)) {
        summary.push_str(&engines);
    }
    fs::write(artifact(cfg, "run_report.txt"), summary)?;
    Ok(report)
}

fn synth_inner(cfg: &PipelineConfig) -> Result<()> {
    let (stack, mask) = synth::generate(&cfg.synth)?;
    raster::save_band_stack(&stack, &artifact(cfg, SCENE_FILE))?;
    raster::save_label_mask(&mask, &artifact(cfg, TRUTH_FILE))?;
    log::info!(
        "synth: wrote {}x{} scene to {}",
        cfg.synth.width,
        cfg.synth.height,
        cfg.output_dir.display()
    );
    Ok(())
}

fn load_input_stack(cfg: &PipelineConfig) -> Result<BandStack> {
    let path = &cfg.input.stack;
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.clone(),
            stage: "synth",
        });
    }
    let stack = raster::load_band_stack(path)?;
    features::append_ndvi(&stack)
}

fn load_truth_mask(cfg: &PipelineConfig, stack: &BandStack) -> Result<LabelMask> {
    if let Some(path) = &cfg.input.mask {
        let mask = raster::load_label_mask(path)?;
        if mask.width() != stack.width() || mask.height() != stack.height() {
            return Err(Error::invalid("mask dimensions do not match band stack"));
        }
        return Ok(mask);
    }
    if let Some(path) = &cfg.input.annotations {
        let polys = raster::load_annotations(path)?;
        return raster::rasterize_annotations(&polys, stack.width(), stack.height());
    }
    Err(Error::invalid(
        "config needs input.mask or input.annotations",
    ))
}

fn features_inner(cfg: &PipelineConfig) -> Result<()> {
    let stack = load_input_stack(cfg)?;
    let mask = load_truth_mask(cfg, &stack)?;
    let (_, stats) = features::normalize_channels(&stack)?;
    let splits = features::compute_splits(&mask, cfg.split, cfg.seed)?;
    save_norm_stats(&stats, stack.band_names(), &artifact(cfg, NORM_FILE))?;
    save_splits(&splits, &artifact(cfg, SPLITS_FILE))?;
    log::info!(
        "features: {} labeled / {} unlabeled / {} test rows",
        splits.labeled_idx.len(),
        splits.unlabeled_idx.len(),
        splits.test_idx.len()
    );
    Ok(())
}

fn load_features(cfg: &PipelineConfig) -> Result<(BandStack, NormStats, SplitAssignment)> {
    let stack = load_input_stack(cfg)?;
    let (stats, _) = load_norm_stats(&require(artifact(cfg, NORM_FILE), "features")?)?;
    let splits = load_splits(&require(artifact(cfg, SPLITS_FILE), "features")?)?;
    let normalized = features::apply_norm_stats(&stack, &stats)?;
    Ok((normalized, stats, splits))
}

fn pretrain_inner(cfg: &PipelineConfig) -> Result<()> {
    let (stack, stats, splits) = load_features(cfg)?;
    let dataset = features::materialize_dataset(&stack, &splits, cfg.patch_size)?;
    let train_rows = dataset.train_rows();
    let x_train = nn::gather_rows(&dataset.x.view(), &train_rows);
    let (encoders, histories) =
        nn::pretrain_encoders(&x_train.view(), &cfg.network.encoder_dims, &cfg.pretrain_cfg())?;
    for (stage, history) in histories.iter().enumerate() {
        log::info!(
            "pretrain stage {stage}: reconstruction loss {:.6} -> {:.6}",
            history.first().unwrap_or(&f64::NAN),
            history.last().unwrap_or(&f64::NAN)
        );
    }
    let model = MlpModel::with_encoders(
        encoders,
        &cfg.network.head_dims,
        dataset.num_classes,
        cfg.seed.wrapping_add(0x4ead),
    )?;
    let bundle = model.to_bundle(
        stats,
        ModelMeta {
            num_classes: dataset.num_classes,
            patch_size: cfg.patch_size,
            band_order: stack.band_names().to_vec(),
            seed: cfg.seed,
        },
    );
    model_io::save_model(&bundle, &artifact(cfg, PRETRAINED_FILE))?;
    Ok(())
}

/// Run all three engines once, recording wall-clock times and pairwise
/// agreement rates. Returns the diagnostics text plus the three soft-target
/// blocks (each aligned with the unlabeled index set).
fn run_engines_with_diagnostics(
    cfg: &PipelineConfig,
    dataset: &PatchDataset,
    embeddings: &Array2<f64>,
) -> Result<(String, [Array2<f64>; 3])> {
    let mut out = String::new();
    let mut soft: Vec<Array2<f64>> = Vec::new();
    for engine in [EngineKind::Manif, EngineKind::Safer, EngineKind::Smir] {
        let t0 = Instant::now();
        let (name, values) = match engine {
            EngineKind::Manif => (
                "manif",
                crate::anchor::soft_targets(dataset, &embeddings.view(), &cfg.ssl.anchor, cfg.seed)
                    .map_err(|e| e.in_engine("anchor"))?,
            ),
            EngineKind::Safer => (
                "safer",
                crate::safer::soft_targets(dataset, &embeddings.view(), &cfg.ssl.safer)
                    .map_err(|e| e.in_engine("safer"))?,
            ),
            EngineKind::Smir => (
                "smir",
                crate::smir::soft_targets(dataset, &embeddings.view(), &cfg.ssl.smir, cfg.seed)
                    .map_err(|e| e.in_engine("smir"))?,
            ),
            EngineKind::WeiAve => unreachable!(),
        };
        writeln!(out, "engine_{name}_seconds {:.3}", t0.elapsed().as_secs_f64()).unwrap();
        soft.push(values);
    }
    let argmax = |m: &Array2<f64>, i: usize| -> usize {
        let row = m.row(i);
        let mut best = 0;
        let mut bv = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v > bv {
                bv = v;
                best = j;
            }
        }
        best
    };
    let names = ["manif", "safer", "smir"];
    for a in 0..3 {
        for b in a + 1..3 {
            let n = soft[a].nrows();
            let agree = (0..n)
                .filter(|&i| argmax(&soft[a], i) == argmax(&soft[b], i))
                .count();
            writeln!(
                out,
                "agreement_{}_{} {:.6}",
                names[a],
                names[b],
                if n == 0 { 1.0 } else { agree as f64 / n as f64 }
            )
            .unwrap();
        }
    }
    let smir_v = soft.pop().unwrap();
    let safer_v = soft.pop().unwrap();
    let manif_v = soft.pop().unwrap();
    Ok((out, [manif_v, safer_v, smir_v]))
}

fn finetune_inner(cfg: &PipelineConfig) -> Result<()> {
    let (stack, stats, splits) = load_features(cfg)?;
    let dataset = features::materialize_dataset(&stack, &splits, cfg.patch_size)?;
    let bundle = model_io::load_model(&require(artifact(cfg, PRETRAINED_FILE), "pretrain")?)?;
    let mut model = MlpModel::from_bundle(&bundle)?;

    let mut history: Vec<(String, usize, f64)> = Vec::new();

    // supervised warm-up of the head on labeled rows only
    let x_labeled = nn::gather_rows(&dataset.x.view(), &dataset.labeled_idx);
    let warm_targets = nn::supervised_targets(&dataset.labeled_targets);
    let frozen = model.encoder_layers;
    let warm = nn::train(
        &mut model,
        &x_labeled.view(),
        &warm_targets,
        &cfg.warmup_cfg(),
        frozen,
    )?;
    for (e, v) in warm.iter().enumerate() {
        history.push(("warmup".into(), e, *v));
    }

    let kind = cfg.finetune.loss;
    let mut engines_report = format!("loss_kind {kind}\n");
    let weiave_active = kind == LossKind::WeiAve && !dataset.unlabeled_idx.is_empty();

    let refresh = cfg.finetune.refresh_period;
    let total_epochs = cfg.finetune.epochs;
    let mut done = 0usize;
    let mut segment = 0u64;
    while done < total_epochs {
        let span = if refresh == 0 {
            total_epochs
        } else {
            refresh.min(total_epochs - done)
        };
        // targets re-assembled on the current embeddings each segment
        let embeddings = model.embed(&dataset.x.view())?;
        let targets = if weiave_active {
            let (diag, [manif, safer, smir]) =
                run_engines_with_diagnostics(cfg, &dataset, &embeddings)?;
            if segment == 0 {
                engines_report.push_str(&diag);
            }
            targets::assemble_weiave_from(
                &dataset,
                &manif,
                &safer,
                &smir,
                cfg.ssl.weiave_mode,
                cfg.ssl.unlabeled_weight,
            )
        } else {
            targets::assemble_targets(kind, &dataset, &embeddings.view(), &cfg.ssl, cfg.seed)?
        };
        let x_rows = nn::gather_rows(&dataset.x.view(), &targets.rows);
        let mut seg_cfg = cfg.finetune_cfg();
        seg_cfg.epochs = span;
        seg_cfg.seed = seg_cfg.seed.wrapping_add(segment);
        let losses = nn::train(&mut model, &x_rows.view(), &targets, &seg_cfg, 0)?;
        for (e, v) in losses.iter().enumerate() {
            history.push(("finetune".into(), done + e, *v));
        }
        done += span;
        segment += 1;
    }

    let out_bundle = model.to_bundle(
        stats,
        ModelMeta {
            num_classes: dataset.num_classes,
            patch_size: cfg.patch_size,
            band_order: stack.band_names().to_vec(),
            seed: cfg.seed,
        },
    );
    model_io::save_model(&out_bundle, &artifact(cfg, MODEL_FILE))?;

    let mut csv = String::from("phase,epoch,loss\n");
    for (phase, epoch, loss) in &history {
        writeln!(csv, "{phase},{epoch},{loss:.12}").unwrap();
    }
    fs::write(artifact(cfg, HISTORY_FILE), csv)?;
    fs::write(artifact(cfg, ENGINES_FILE), engines_report)?;
    Ok(())
}

fn predict_inner(cfg: &PipelineConfig) -> Result<()> {
    let bundle = model_io::load_model(&require(artifact(cfg, MODEL_FILE), "finetune")?)?;
    let model = MlpModel::from_bundle(&bundle)?;
    let stack = load_input_stack(cfg)?;
    if stack.band_names() != bundle.meta.band_order.as_slice() {
        return Err(Error::invalid(format!(
            "band order {:?} does not match the model's {:?}",
            stack.band_names(),
            bundle.meta.band_order
        )));
    }
    let normalized = features::apply_norm_stats(&stack, &bundle.norm)?;
    let patch = bundle.meta.patch_size;
    let (w, h) = (normalized.width(), normalized.height());
    let mut labels = vec![0u8; w * h];
    let chunk = 4096usize;
    let dim = patch * patch * normalized.bands();
    let mut start = 0;
    while start < w * h {
        let end = (start + chunk).min(w * h);
        let mut batch = Array2::zeros((end - start, dim));
        for (bi, idx) in (start..end).enumerate() {
            let v = features::extract_patch(&normalized, idx % w, idx / w, patch)?;
            batch.row_mut(bi).assign(&ndarray::ArrayView1::from(&v));
        }
        let probs = model.forward(&batch.view())?;
        for (bi, idx) in (start..end).enumerate() {
            let row = probs.row(bi);
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            labels[idx] = best as u8 + 1;
        }
        start = end;
    }
    let pred = LabelMask::new(w, h, labels)?;
    raster::save_label_mask(&pred, &artifact(cfg, PRED_FILE))?;
    Ok(())
}

fn postprocess_inner(cfg: &PipelineConfig) -> Result<()> {
    let pred = raster::load_label_mask(&require(artifact(cfg, PRED_FILE), "predict")?)?;
    // building class is class 1; vote on the binary mask, then erode
    let binary = pred.class_indicator(1);
    let voted = postprocess::majority_filter(
        &binary,
        cfg.postprocess.radius,
        cfg.postprocess.vote_shape,
    )?;
    let eroded = postprocess::erode_binary(&voted, cfg.postprocess.erosion_window)?;
    raster::save_label_mask(&eroded, &artifact(cfg, BUILDING_FILE))?;
    Ok(())
}

fn evaluate_inner(cfg: &PipelineConfig) -> Result<RunReport> {
    let stack = load_input_stack(cfg)?;
    let truth = load_truth_mask(cfg, &stack)?;
    let splits = load_splits(&require(artifact(cfg, SPLITS_FILE), "features")?)?;
    let pred = raster::load_label_mask(&require(artifact(cfg, PRED_FILE), "predict")?)?;
    let building = raster::load_label_mask(&require(artifact(cfg, BUILDING_FILE), "postprocess")?)?;

    let mut report = RunReport::default();
    let mut put = |k: &str, v: String| {
        report.entries.insert(k.to_string(), v);
    };
    put("loss_kind", cfg.finetune.loss.to_string());
    put("seed", cfg.seed.to_string());
    put("num_classes", splits.num_classes.to_string());
    put("patch_size", cfg.patch_size.to_string());

    let to_pixels = |rows: &[usize]| -> Vec<usize> {
        rows.iter()
            .map(|&r| {
                let (x, y) = splits.coords[r];
                y * truth.width() + x
            })
            .collect()
    };
    for (name, rows) in [
        ("labeled", &splits.labeled_idx),
        ("unlabeled", &splits.unlabeled_idx),
        ("test", &splits.test_idx),
    ] {
        let pixels = to_pixels(rows);
        put(&format!("rows_{name}"), rows.len().to_string());
        let acc = metrics::multiclass_accuracy(&pred, &truth, &pixels)?;
        put(&format!("accuracy_{name}"), format!("{acc:.6}"));
        let counts = metrics::confusion(&pred, &truth, Some(&pixels), splits.num_classes)?;
        let scored: Vec<Scores> = counts.iter().map(metrics::scores).collect();
        let macro_p = scored.iter().map(|s| s.precision).sum::<f64>() / scored.len() as f64;
        let macro_r = scored.iter().map(|s| s.recall).sum::<f64>() / scored.len() as f64;
        put(&format!("precision_macro_{name}"), format!("{macro_p:.6}"));
        put(&format!("recall_macro_{name}"), format!("{macro_r:.6}"));
        if name == "test" {
            for (ci, s) in scored.iter().enumerate() {
                let c = ci + 1;
                put(&format!("test_class{c}_precision"), format!("{:.6}", s.precision));
                put(&format!("test_class{c}_recall"), format!("{:.6}", s.recall));
                put(&format!("test_class{c}_f1"), format!("{:.6}", s.f1));
                put(&format!("test_class{c}_csi"), format!("{:.6}", s.csi));
            }
        }
    }

    // binary building evaluation over every annotated pixel, after cleanup
    let truth_building = truth.class_indicator(1);
    let annotated: Vec<usize> = truth
        .labels()
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v > 0)
        .map(|(i, _)| i)
        .collect();
    let counts = metrics::confusion(&building, &truth_building, Some(&annotated), 1)?;
    let s = metrics::scores(&counts[0]);
    put("binary_building_accuracy", format!("{:.6}", s.accuracy));
    put("binary_building_precision", format!("{:.6}", s.precision));
    put("binary_building_recall", format!("{:.6}", s.recall));
    put("binary_building_f1", format!("{:.6}", s.f1));
    put("binary_building_csi", format!("{:.6}", s.csi));

    report.table = render_table(&report);
    fs::write(artifact(cfg, METRICS_KV_FILE), report.kv_text())?;
    fs::write(artifact(cfg, METRICS_TXT_FILE), &report.table)?;
    Ok(report)
}

fn render_table(report: &RunReport) -> String {
    let g = |k: &str| report.entries.get(k).cloned().unwrap_or_else(|| "-".into());
    let mut t = String::new();
    writeln!(t, "run: loss={} seed={}", g("loss_kind"), g("seed")).unwrap();
    writeln!(t).unwrap();
    writeln!(t, "{:<12} {:>8} {:>10} {:>10} {:>10}", "set", "rows", "accuracy", "precision", "recall").unwrap();
    for set in ["labeled", "unlabeled", "test"] {
        writeln!(
            t,
            "{:<12} {:>8} {:>10} {:>10} {:>10}",
            set,
            g(&format!("rows_{set}")),
            g(&format!("accuracy_{set}")),
            g(&format!("precision_macro_{set}")),
            g(&format!("recall_macro_{set}"))
        )
        .unwrap();
    }
    writeln!(t).unwrap();
    let c = g("num_classes").parse::<usize>().unwrap_or(0);
    writeln!(t, "{:<12} {:>10} {:>10} {:>10} {:>10}", "test class", "precision", "recall", "f1", "csi").unwrap();
    for class in 1..=c {
        writeln!(
            t,
            "{:<12} {:>10} {:>10} {:>10} {:>10}",
            format!("class {class}"),
            g(&format!("test_class{class}_precision")),
            g(&format!("test_class{class}_recall")),
            g(&format!("test_class{class}_f1")),
            g(&format!("test_class{class}_csi"))
        )
        .unwrap();
    }
    writeln!(t).unwrap();
    writeln!(
        t,
        "building (binary, post-processed): acc={} pr={} rec={} f1={} csi={}",
        g("binary_building_accuracy"),
        g("binary_building_precision"),
        g("binary_building_recall"),
        g("binary_building_f1"),
        g("binary_building_csi")
    )
    .unwrap();
    t
}

/// Ranking table across several finished runs (one metrics.kv per run
/// directory): recall, precision, CSI and F1 of the binary building task,
/// with per-metric rank indices in parentheses.
pub fn compare_report(dirs: &[PathBuf]) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::invalid("compare needs at least one run directory"));
    }
    let mut rows = Vec::new();
    for dir in dirs {
        let path = dir.join(METRICS_KV_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|_| Error::MissingArtifact { path, stage: "evaluate" })?;
        let report = RunReport::from_kv_text(&text);
        let kind = report
            .entries
            .get("loss_kind")
            .cloned()
            .unwrap_or_else(|| dir.display().to_string());
        let pick = |k: &str| report.get_f64(k).unwrap_or(0.0);
        rows.push((
            kind,
            [
                pick("binary_building_recall"),
                pick("binary_building_precision"),
                pick("binary_building_csi"),
                pick("binary_building_f1"),
            ],
        ));
    }
    let mut ranks = vec![[0usize; 4]; rows.len()];
    for m in 0..4 {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| rows[b].1[m].partial_cmp(&rows[a].1[m]).unwrap());
        for (rank, &i) in order.iter().enumerate() {
            ranks[i][m] = rank + 1;
        }
    }
    let mut t = String::new();
    writeln!(
        t,
        "{:<10} {:>12} {:>12} {:>12} {:>12}",
        "loss", "rec (%)", "pr (%)", "csi (%)", "f1 (%)"
    )
    .unwrap();
    for (i, (kind, vals)) in rows.iter().enumerate() {
        writeln!(
            t,
            "{:<10} {:>8.1} ({}) {:>8.1} ({}) {:>8.1} ({}) {:>8.1} ({})",
            kind,
            vals[0] * 100.0,
            ranks[i][0],
            vals[1] * 100.0,
            ranks[i][1],
            vals[2] * 100.0,
            ranks[i][2],
            vals[3] * 100.0,
            ranks[i][3]
        )
        .unwrap();
    }
    Ok(t)
}

// ---------------------------------------------------------------------
// small text artifacts
// ---------------------------------------------------------------------

fn save_norm_stats(stats: &NormStats, bands: &[String], path: &Path) -> Result<()> {
    let mut out = String::from("band mean std\n");
    for (i, name) in bands.iter().enumerate() {
        writeln!(out, "{} {} {}", name, stats.mean[i], stats.std[i]).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_norm_stats(path: &Path) -> Result<(NormStats, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    let mut bands = Vec::new();
    for line in text.lines().skip(1) {
        let mut parts = line.split_whitespace();
        let (name, m, s) = (
            parts.next().ok_or_else(|| Error::format(path, "bad stats line"))?,
            parts.next().ok_or_else(|| Error::format(path, "bad stats line"))?,
            parts.next().ok_or_else(|| Error::format(path, "bad stats line"))?,
        );
        bands.push(name.to_string());
        mean.push(m.parse().map_err(|_| Error::format(path, "bad mean"))?);
        std.push(s.parse().map_err(|_| Error::format(path, "bad std"))?);
    }
    Ok((NormStats { mean, std }, bands))
}

fn save_splits(splits: &SplitAssignment, path: &Path) -> Result<()> {
    let mut set = vec![b'x'; splits.coords.len()];
    for &r in &splits.labeled_idx {
        set[r] = b'l';
    }
    for &r in &splits.unlabeled_idx {
        set[r] = b'u';
    }
    for &r in &splits.test_idx {
        set[r] = b't';
    }
    let mut out = String::from("row x y class split\n");
    for (r, &(x, y)) in splits.coords.iter().enumerate() {
        writeln!(out, "{} {} {} {} {}", r, x, y, splits.classes[r], set[r] as char).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_splits(path: &Path) -> Result<SplitAssignment> {
    let text = fs::read_to_string(path)?;
    let mut coords = Vec::new();
    let mut classes = Vec::new();
    let mut labeled_idx = Vec::new();
    let mut unlabeled_idx = Vec::new();
    let mut test_idx = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(Error::format(path, format!("bad split line {line:?}")));
        }
        let row: usize = parts[0].parse().map_err(|_| Error::format(path, "bad row"))?;
        if row != coords.len() {
            return Err(Error::format(path, "split rows out of order"));
        }
        let x: usize = parts[1].parse().map_err(|_| Error::format(path, "bad x"))?;
        let y: usize = parts[2].parse().map_err(|_| Error::format(path, "bad y"))?;
        let class: u8 = parts[3].parse().map_err(|_| Error::format(path, "bad class"))?;
        if class == 0 {
            return Err(Error::format(path, "class 0 in splits"));
        }
        coords.push((x, y));
        classes.push(class);
        match parts[4] {
            "l" => labeled_idx.push(row),
            "u" => unlabeled_idx.push(row),
            "t" => test_idx.push(row),
            "x" => {}
            other => return Err(Error::format(path, format!("bad split tag {other:?}"))),
        }
    }
    let num_classes = classes.iter().copied().max().unwrap_or(0) as usize;
    if num_classes == 0 {
        return Err(Error::format(path, "no annotated rows"));
    }
    Ok(SplitAssignment {
        coords,
        classes,
        num_classes,
        labeled_idx,
        unlabeled_idx,
        test_idx,
    })
}

/// Convenience for tests and the synthetic acceptance runs: generate the
/// scene, point the config at it, and return the adjusted config.
pub fn config_for_synthetic_run(mut cfg: PipelineConfig) -> Result<PipelineConfig> {
    let _lock = LockGuard::acquire(&cfg.output_dir)?;
    synth_inner(&cfg)?;
    cfg.input.stack = artifact(&cfg, SCENE_FILE);
    cfg.input.mask = Some(artifact(&cfg, TRUTH_FILE));
    Ok(cfg)
}

/// Gradient-check entry covering all six loss kinds on a random five-layer
/// model; used by the verification suite.
pub fn gradient_check_all_kinds(seed: u64) -> Result<f64> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let model = MlpModel::from_dims(&[8, 7, 6, 5, 4, 3], 2, seed)?;
    let x = Array2::from_shape_fn((6, 8), |_| rng.gen_range(-1.5..1.5));
    let mut worst = 0.0f64;
    let simplex = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut t = Array2::from_shape_fn((6, 3), |_| rng.gen_range(0.05..1.0));
        for mut row in t.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        t
    };
    for kind in LossKind::ALL {
        let targets = match kind {
            LossKind::Mae => {
                // keep residuals away from the kink
                let out = model.forward(&x.view())?;
                let t = out.mapv(|p| (p + 0.07).min(0.999));
                ExtendedTargets::labeled_only(kind, t)
            }
            LossKind::WeiAve => ExtendedTargets {
                kind,
                rows: (0..6).collect(),
                weights: vec![1.0; 6],
                payload: TargetPayload::HarmonicLosses {
                    manif: simplex(&mut rng),
                    safer: simplex(&mut rng),
                    smir: simplex(&mut rng),
                },
            },
            _ => ExtendedTargets::labeled_only(kind, simplex(&mut rng)),
        };
        let err = nn::gradient_check(&model, &x.view(), &targets)?;
        let bound = if kind == LossKind::Mae { 1e-4 } else { 1e-6 };
        if err >= bound {
            return Err(Error::numerical(format!(
                "gradient check failed for {kind}: {err:.3e}"
            )));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
