//! Per-task evaluation over a corpus split: metric reports, per-instance
//! records and optional visualization grids.

use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use serde::Serialize;

use refseg_nn::{ParamStore, Scalar};

use crate::config::{InferCfg, RunConfig};
use crate::corpus::{self, read_instance, read_meta};
use crate::error::{CoreError, Result};
use crate::inference::InferenceEngine;
use crate::mask::BinaryMask;
use crate::metrics::{self, MetricReport};
use crate::model::RefSegModel;
use crate::tasks::{TaskInstance, TaskKind};

#[derive(Debug, Clone, Serialize)]
pub struct InstanceResult {
    pub index: usize,
    pub task: String,
    pub iou: f64,
    pub boundary_f: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub task: String,
    pub split: String,
    pub instances: usize,
    pub config_hash: String,
    pub oiou: f64,
    pub miou: f64,
    pub j: f64,
    pub f: f64,
    pub jf_mean: f64,
}

pub struct EvalOutcome {
    pub report: MetricReport,
    pub records: Vec<InstanceResult>,
}

/// Refuse evaluating a checkpoint against a corpus it was not configured
/// for (matching data seed and canvas), unless overridden.
pub fn check_corpus_compat(cfg: &RunConfig, corpus_root: &Path) -> Result<()> {
    let meta = read_meta(corpus_root)?;
    if meta.seed != cfg.data.seed || meta.canvas != cfg.data.canvas {
        return Err(CoreError::Config(format!(
            "corpus (seed {}, canvas {:?}) does not match checkpoint config (seed {}, canvas {:?}); \
             pass --allow-mismatch to override",
            meta.seed, meta.canvas, cfg.data.seed, cfg.data.canvas
        )));
    }
    Ok(())
}

/// Evaluate one task over a split. `n_shot` only affects FSS.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_task<T: Scalar>(
    model: &RefSegModel,
    store: &ParamStore<T>,
    corpus_root: &Path,
    split: &str,
    task: TaskKind,
    infer_cfg: &InferCfg,
    n_shot: usize,
    limit: Option<usize>,
) -> Result<EvalOutcome> {
    let engine = InferenceEngine::new(model, store, infer_cfg.clone());
    let count = corpus::count_instances(corpus_root, split, task);
    if count == 0 {
        return Err(CoreError::Corpus(format!(
            "no {} instances in split {split}",
            task.name()
        )));
    }
    let count = limit.map_or(count, |l| l.min(count));
    let mut preds: Vec<BinaryMask> = Vec::new();
    let mut gts: Vec<BinaryMask> = Vec::new();
    let mut records = Vec::new();
    let mut video_reports: Vec<MetricReport> = Vec::new();

    for idx in 0..count {
        let inst = read_instance(&corpus::instance_dir(corpus_root, split, task, idx))?;
        match task {
            TaskKind::Ris => {
                let tokens = inst.language_tokens.as_ref().unwrap();
                let (mask, score) =
                    engine.segment_image(&inst.frames[0], &[crate::model::RefInput::Lang(tokens)])?;
                let iou = mask.iou(&inst.gt_masks[0]);
                let (h, w) = mask.dims();
                let f = metrics::boundary_f(
                    &mask,
                    &inst.gt_masks[0],
                    metrics::default_boundary_tolerance(h, w),
                )?;
                records.push(InstanceResult {
                    index: idx,
                    task: task.name().to_string(),
                    iou,
                    boundary_f: f,
                    score,
                });
                preds.push(mask);
                gts.push(inst.gt_masks[0].clone());
            }
            TaskKind::Fss => {
                let supports = gather_supports(corpus_root, split, &inst, idx, n_shot, count)?;
                let (mask, score) = engine.segment_fewshot(&inst.frames[0], &supports)?;
                let iou = mask.iou(&inst.gt_masks[0]);
                let (h, w) = mask.dims();
                let f = metrics::boundary_f(
                    &mask,
                    &inst.gt_masks[0],
                    metrics::default_boundary_tolerance(h, w),
                )?;
                records.push(InstanceResult {
                    index: idx,
                    task: task.name().to_string(),
                    iou,
                    boundary_f: f,
                    score,
                });
                preds.push(mask);
                gts.push(inst.gt_masks[0].clone());
            }
            TaskKind::Vos | TaskKind::Rvos => {
                let pred = match task {
                    TaskKind::Vos => engine.propagate_video(
                        &inst.frames,
                        TaskKind::Vos,
                        None,
                        Some(&inst.gt_masks[0]),
                    )?,
                    _ => engine.propagate_video(
                        &inst.frames,
                        TaskKind::Rvos,
                        inst.language_tokens.as_deref(),
                        None,
                    )?,
                };
                // for VOS the first frame is the given annotation
                let skip = usize::from(task == TaskKind::Vos && inst.frames.len() > 1);
                let report =
                    metrics::jf_score(&pred.masks[skip..], &inst.gt_masks[skip..])?;
                records.push(InstanceResult {
                    index: idx,
                    task: task.name().to_string(),
                    iou: report.j,
                    boundary_f: report.f,
                    score: pred.scores.iter().copied().fold(0.0, f64::max),
                });
                video_reports.push(report);
            }
        }
    }

    let report = match task {
        TaskKind::Ris | TaskKind::Fss => {
            let mut r = metrics::image_report(&preds, &gts)?;
            let (oiou, miou) = metrics::dataset_iou(&preds, &gts)?;
            r.oiou = oiou;
            r.miou = miou;
            r
        }
        _ => {
            let n = video_reports.len().max(1) as f64;
            let j = video_reports.iter().map(|r| r.j).sum::<f64>() / n;
            let f = video_reports.iter().map(|r| r.f).sum::<f64>() / n;
            MetricReport {
                oiou: video_reports.iter().map(|r| r.oiou).sum::<f64>() / n,
                miou: j,
                j,
                f,
                jf_mean: 0.5 * (j + f),
                per_sample: video_reports
                    .iter()
                    .map(|r| (r.j, r.f))
                    .collect(),
            }
        }
    };
    Ok(EvalOutcome { report, records })
}

/// Append structured records (one line per instance, plus aggregate).
pub fn write_eval_records(
    out: &Path,
    cfg: &RunConfig,
    split: &str,
    task: TaskKind,
    outcome: &EvalOutcome,
) -> Result<()> {
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(out)?;
    for r in &outcome.records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    let summary = EvalSummary {
        task: task.name().to_string(),
        split: split.to_string(),
        instances: outcome.records.len(),
        config_hash: cfg.hash(),
        oiou: outcome.report.oiou,
        miou: outcome.report.miou,
        j: outcome.report.j,
        f: outcome.report.f,
        jf_mean: outcome.report.jf_mean,
    };
    writeln!(f, "{}", serde_json::to_string(&summary)?)?;
    Ok(())
}

/// Collect `n_shot` same-class supports for one FSS query: the instance's
/// own support first, then other instances of the same shape kind.
fn gather_supports(
    corpus_root: &Path,
    split: &str,
    inst: &TaskInstance,
    idx: usize,
    n_shot: usize,
    count: usize,
) -> Result<Vec<(Array3<f32>, BinaryMask)>> {
    let mut supports = vec![(
        inst.reference_frame.clone().unwrap(),
        inst.reference_mask.clone().unwrap(),
    )];
    if n_shot <= 1 {
        return Ok(supports);
    }
    let class = inst.fss_class;
    let mut probe = (idx + 1) % count;
    while supports.len() < n_shot && probe != idx {
        let other = read_instance(&corpus::instance_dir(
            corpus_root,
            split,
            TaskKind::Fss,
            probe,
        ))?;
        if other.fss_class == class {
            supports.push((
                other.reference_frame.clone().unwrap(),
                other.reference_mask.clone().unwrap(),
            ));
        }
        probe = (probe + 1) % count;
    }
    Ok(supports)
}

/// Visualization grid: frame | ground truth | prediction, mask areas tinted.
pub fn write_vis_grid(
    path: &Path,
    frame: &Array3<f32>,
    gt: &BinaryMask,
    pred: &BinaryMask,
) -> Result<()> {
    let (h, w) = gt.dims();
    let mut img = image::RgbImage::new((3 * w + 2) as u32, h as u32);
    let put = |img: &mut image::RgbImage, ox: usize, i: usize, j: usize, px: [u8; 3]| {
        img.put_pixel((ox + j) as u32, i as u32, image::Rgb(px));
    };
    for i in 0..h {
        for j in 0..w {
            let base = [
                (frame[[0, i, j]] * 255.0) as u8,
                (frame[[1, i, j]] * 255.0) as u8,
                (frame[[2, i, j]] * 255.0) as u8,
            ];
            put(&mut img, 0, i, j, base);
            let tint = |on: bool| {
                if on {
                    [255u8, 64, 64]
                } else {
                    [base[0] / 2, base[1] / 2, base[2] / 2]
                }
            };
            put(&mut img, w + 1, i, j, tint(gt.get(i, j)));
            put(&mut img, 2 * w + 2, i, j, tint(pred.get(i, j)));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(())
}
