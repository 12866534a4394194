//! Corpus generation and the on-disk layout.
//!
//! Layout (all images lossless PNG):
//!
//! ```text
//! <root>/meta.json                         corpus-level record
//! <root>/<split>/<task>/<index>/
//!     instance.json                        sidecar record (see [`InstanceRecord`])
//!     frame_000.png ...                    RGB8 frames
//!     mask_000.png ...                     Gray8 ground-truth masks (0/255)
//!     ref_frame.png, ref_mask.png          reference pair, when present
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::BBox;
use crate::mask::BinaryMask;
use crate::scene::{generate_scene, ObjectSpec, SceneSpec};
use crate::tasks::{make_task_instances, TaskInstance, TaskKind};
use crate::vocab::{self, expression_text};

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub format_version: u32,
    pub seed: u64,
    pub canvas: (usize, usize),
    pub video_frames: (usize, usize),
    pub vocab_size: usize,
    pub counts: Vec<(String, String, usize)>,
}

/// Sidecar record stored next to each instance's images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub task: TaskKind,
    pub frame_count: usize,
    pub language_tokens: Option<Vec<usize>>,
    pub expression: Option<String>,
    /// Per-frame normalized center-form boxes; `null` when invisible.
    pub boxes: Vec<Option<[f64; 4]>>,
    pub visibility: Vec<bool>,
    pub has_reference: bool,
    pub fss_class: Option<String>,
    pub seed: u64,
}

/// Generation knobs for one corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusCfg {
    pub seed: u64,
    pub canvas: (usize, usize),
    pub video_frames: (usize, usize),
    pub train_ris: usize,
    pub train_fss: usize,
    pub train_vos: usize,
    pub train_rvos: usize,
    pub eval_ris: usize,
    pub eval_fss: usize,
    pub eval_vos: usize,
    pub eval_rvos: usize,
}

impl Default for CorpusCfg {
    fn default() -> Self {
        CorpusCfg {
            seed: 7,
            canvas: (128, 128),
            video_frames: (8, 12),
            train_ris: 400,
            train_fss: 250,
            train_vos: 250,
            train_rvos: 250,
            eval_ris: 40,
            eval_fss: 30,
            eval_vos: 16,
            eval_rvos: 16,
        }
    }
}

/// Draw a random scene. Objects get distinct (color, shape) pairs so a
/// unique referring expression always exists.
pub fn sample_scene(
    rng: &mut ChaCha8Rng,
    canvas: (usize, usize),
    frame_count: usize,
    with_video_events: bool,
) -> SceneSpec {
    let (h, w) = canvas;
    let n_objects = 1 + rng.gen_range(0..3).min(rng.gen_range(0..3));
    let mut combos: Vec<(usize, usize)> = Vec::new();
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let combo = loop {
            let c = (
                rng.gen_range(0..vocab::COLORS.len()),
                rng.gen_range(0..vocab::SHAPES.len()),
            );
            if !combos.contains(&c) {
                break c;
            }
        };
        combos.push(combo);
        let size = rng.gen_range(0.10..0.19) * h.min(w) as f64;
        let margin = size + 1.0;
        let moving = rng.gen_bool(0.75);
        let speed = if moving { rng.gen_range(0.8..2.6) } else { 0.0 };
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let occlusion = if with_video_events && frame_count >= 6 && rng.gen_bool(0.35) {
            let a = rng.gen_range(2..frame_count - 2);
            let b = (a + rng.gen_range(1..3)).min(frame_count - 2);
            Some((a, b))
        } else {
            None
        };
        let disappear = if with_video_events && frame_count >= 6 && rng.gen_bool(0.25) {
            let a = rng.gen_range(2..frame_count - 2);
            let b = (a + rng.gen_range(1..3)).min(frame_count - 2);
            Some((a, b))
        } else {
            None
        };
        objects.push(ObjectSpec {
            shape: vocab::SHAPES[combo.1],
            color: vocab::COLORS[combo.0],
            size_px: size,
            start: (
                rng.gen_range(margin..w as f64 - margin),
                rng.gen_range(margin..h as f64 - margin),
            ),
            velocity: (speed * angle.cos(), speed * angle.sin()),
            occlusion,
            disappear,
        });
    }
    SceneSpec {
        objects,
        height: h,
        width: w,
        frame_count,
        rng_seed: rng.gen(),
    }
}

/// Sample one task instance, retrying scene draws that violate the task's
/// preconditions (ambiguity, first-frame visibility).
pub fn sample_instance(
    task: TaskKind,
    cfg: &CorpusCfg,
    rng: &mut ChaCha8Rng,
) -> Result<TaskInstance> {
    for _ in 0..32 {
        let frame_count = match task {
            TaskKind::Ris | TaskKind::Fss => 1,
            _ => rng.gen_range(cfg.video_frames.0..=cfg.video_frames.1),
        };
        let video_events = matches!(task, TaskKind::Vos | TaskKind::Rvos);
        let spec = sample_scene(rng, cfg.canvas, frame_count, video_events);
        let rendered = match generate_scene(&spec) {
            Ok(r) => r,
            Err(_) => continue,
        };
        match make_task_instances(&rendered, task, rng) {
            Ok(mut insts) => return Ok(insts.remove(0)),
            Err(_) => continue,
        }
    }
    Err(CoreError::Corpus(format!(
        "failed to sample a valid {} instance",
        task.name()
    )))
}

fn image_to_rgb8(img: &Array3<f32>) -> image::RgbImage {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = image::Rgb([
                (img[[0, i, j]] * 255.0).round() as u8,
                (img[[1, i, j]] * 255.0).round() as u8,
                (img[[2, i, j]] * 255.0).round() as u8,
            ]);
            out.put_pixel(j as u32, i as u32, px);
        }
    }
    out
}

fn rgb8_to_image(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (j, i, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, i as usize, j as usize]] = px.0[c] as f32 / 255.0;
        }
    }
    out
}

fn mask_to_gray8(mask: &BinaryMask) -> image::GrayImage {
    let (h, w) = mask.dims();
    let mut out = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            out.put_pixel(j as u32, i as u32, image::Luma([mask.grid()[[i, j]] * 255]));
        }
    }
    out
}

fn gray8_to_mask(img: &image::GrayImage) -> Result<BinaryMask> {
    let (w, h) = img.dimensions();
    let mut grid = Array2::<u8>::zeros((h as usize, w as usize));
    for (j, i, px) in img.enumerate_pixels() {
        grid[[i as usize, j as usize]] = u8::from(px.0[0] >= 128);
    }
    BinaryMask::new(grid)
}

/// Write one instance directory.
pub fn write_instance(dir: &Path, inst: &TaskInstance) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, frame) in inst.frames.iter().enumerate() {
        image_to_rgb8(frame).save(dir.join(format!("frame_{t:03}.png")))?;
        mask_to_gray8(&inst.gt_masks[t]).save(dir.join(format!("mask_{t:03}.png")))?;
    }
    if let (Some(rf), Some(rm)) = (&inst.reference_frame, &inst.reference_mask) {
        image_to_rgb8(rf).save(dir.join("ref_frame.png"))?;
        mask_to_gray8(rm).save(dir.join("ref_mask.png"))?;
    }
    let record = InstanceRecord {
        task: inst.task,
        frame_count: inst.frames.len(),
        language_tokens: inst.language_tokens.clone(),
        expression: inst
            .language_tokens
            .as_ref()
            .map(|t| expression_text(t)),
        boxes: inst
            .gt_boxes
            .iter()
            .map(|b| b.map(|b| b.as_array()))
            .collect(),
        visibility: inst.visibility.clone(),
        has_reference: inst.reference_mask.is_some(),
        fss_class: inst.fss_class.map(|c| c.name().to_string()),
        seed: inst.seed,
    };
    let json = serde_json::to_string_pretty(&record)?;
    fs::write(dir.join("instance.json"), json)?;
    Ok(())
}

/// Read one instance directory back.
pub fn read_instance(dir: &Path) -> Result<TaskInstance> {
    let data = fs::read_to_string(dir.join("instance.json"))
        .map_err(|e| CoreError::Corpus(format!("{}: {e}", dir.display())))?;
    let record: InstanceRecord = serde_json::from_str(&data)?;
    let mut frames = Vec::with_capacity(record.frame_count);
    let mut masks = Vec::with_capacity(record.frame_count);
    for t in 0..record.frame_count {
        let img = image::open(dir.join(format!("frame_{t:03}.png")))?.into_rgb8();
        frames.push(rgb8_to_image(&img));
        let m = image::open(dir.join(format!("mask_{t:03}.png")))?.into_luma8();
        masks.push(gray8_to_mask(&m)?);
    }
    let (reference_frame, reference_mask) = if record.has_reference {
        let rf = image::open(dir.join("ref_frame.png"))?.into_rgb8();
        let rm = image::open(dir.join("ref_mask.png"))?.into_luma8();
        (Some(rgb8_to_image(&rf)), Some(gray8_to_mask(&rm)?))
    } else {
        (None, None)
    };
    let inst = TaskInstance {
        task: record.task,
        frames,
        language_tokens: record.language_tokens,
        reference_frame,
        reference_mask,
        gt_masks: masks,
        gt_boxes: record
            .boxes
            .iter()
            .map(|b| b.map(|[cx, cy, w, h]| BBox::new(cx, cy, w, h)))
            .collect(),
        visibility: record.visibility,
        fss_class: record.fss_class.as_deref().and_then(|n| {
            crate::vocab::SHAPES.iter().copied().find(|s| s.name() == n)
        }),
        seed: record.seed,
    };
    inst.validate()?;
    Ok(inst)
}

/// Generate a full corpus under `root`. Instance `i` of each (split, task)
/// pair derives its RNG from `(seed, stream)` splitting, so generation is
/// reproducible and could be parallelized per instance.
pub fn generate_corpus(root: &Path, cfg: &CorpusCfg) -> Result<CorpusMeta> {
    let plan: Vec<(&str, TaskKind, usize, u64)> = vec![
        ("train", TaskKind::Ris, cfg.train_ris, 0),
        ("train", TaskKind::Fss, cfg.train_fss, 1),
        ("train", TaskKind::Vos, cfg.train_vos, 2),
        ("train", TaskKind::Rvos, cfg.train_rvos, 3),
        ("eval", TaskKind::Ris, cfg.eval_ris, 4),
        ("eval", TaskKind::Fss, cfg.eval_fss, 5),
        ("eval", TaskKind::Vos, cfg.eval_vos, 6),
        ("eval", TaskKind::Rvos, cfg.eval_rvos, 7),
    ];
    let mut counts = Vec::new();
    for (split, task, count, stream_base) in &plan {
        for i in 0..*count {
            let mut rng =
                refseg_nn::rng::child(cfg.seed, stream_base * 1_000_000 + i as u64);
            let inst = sample_instance(*task, cfg, &mut rng)?;
            let dir = instance_dir(root, split, *task, i);
            write_instance(&dir, &inst)?;
        }
        counts.push((split.to_string(), task.name().to_string(), *count));
    }
    let meta = CorpusMeta {
        format_version: CORPUS_FORMAT_VERSION,
        seed: cfg.seed,
        canvas: cfg.canvas,
        video_frames: cfg.video_frames,
        vocab_size: vocab::VOCAB_SIZE,
        counts,
    };
    fs::create_dir_all(root)?;
    fs::write(root.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn instance_dir(root: &Path, split: &str, task: TaskKind, index: usize) -> PathBuf {
    root.join(split)
        .join(task.name().to_ascii_lowercase())
        .join(format!("{index:06}"))
}

pub fn read_meta(root: &Path) -> Result<CorpusMeta> {
    let data = fs::read_to_string(root.join("meta.json"))
        .map_err(|e| CoreError::Corpus(format!("missing corpus meta: {e}")))?;
    Ok(serde_json::from_str(&data)?)
}

/// Number of instances present for a (split, task) pair.
pub fn count_instances(root: &Path, split: &str, task: TaskKind) -> usize {
    let meta = read_meta(root).ok();
    if let Some(meta) = meta {
        for (s, t, n) in &meta.counts {
            if s == split && t == task.name() {
                return *n;
            }
        }
    }
    0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn instance_roundtrip_is_exact() {
        let cfg = CorpusCfg {
            canvas: (64, 64),
            video_frames: (4, 6),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let inst = sample_instance(TaskKind::Rvos, &cfg, &mut rng).unwrap();
        let dir = std::env::temp_dir().join(format!("refseg-corpus-test-{}", std::process::id()));
        write_instance(&dir, &inst).unwrap();
        let back = read_instance(&dir).unwrap();
        assert_eq!(back.task, inst.task);
        assert_eq!(back.language_tokens, inst.language_tokens);
        assert_eq!(back.visibility, inst.visibility);
        assert_eq!(back.gt_masks, inst.gt_masks);
        for (a, b) in back.frames.iter().zip(inst.frames.iter()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn seed_splitting_is_stable() {
        let cfg = CorpusCfg {
            canvas: (64, 64),
            ..Default::default()
        };
        let a = sample_instance(
            TaskKind::Ris,
            &cfg,
            &mut refseg_nn::rng::child(1, 5),
        )
        .unwrap();
        let b = sample_instance(
            TaskKind::Ris,
            &cfg,
            &mut refseg_nn::rng::child(1, 5),
        )
        .unwrap();
        assert_eq!(a.language_tokens, b.language_tokens);
        assert_eq!(a.gt_masks, b.gt_masks);
    }
}
