//! Joint multi-task training: staged task sampling, set-prediction loss
//! with auxiliary decoder supervision, AdamW with step decay, JSONL logs.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use refseg_nn::optim::AdamW;
use refseg_nn::{ParamStore, Scalar, Session};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::{self, read_instance};
use crate::error::{CoreError, Result};
use crate::losses::{self, Assignment, LossBreakdown, PositiveMaskVars};
use crate::model::{RefInput, RefSegModel};
use crate::tasks::{pseudo_video, TaskInstance, TaskKind};

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub stage: &'static str,
    pub task: String,
    pub lr: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub mask_bce: f64,
    pub dice: f64,
    pub total: f64,
}

/// Which references and target frame one training step uses.
struct TrainSample {
    refs_task: TaskKind,
    instance: TaskInstance,
    ref_frame_idx: Option<usize>,
    target_frame_idx: usize,
}

pub struct Trainer<'a> {
    pub cfg: RunConfig,
    pub corpus_root: PathBuf,
    pub out_dir: PathBuf,
    model: &'a RefSegModel,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: RunConfig,
        corpus_root: &Path,
        out_dir: &Path,
        model: &'a RefSegModel,
    ) -> Self {
        Trainer {
            cfg,
            corpus_root: corpus_root.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
            model,
        }
    }

    /// Run both stages: image-level (RIS + FSS), then video-level
    /// (VOS + RVOS + pseudo-videos) with the text encoder frozen.
    /// Writes `stage_image.ckpt`, `model.ckpt` and `train_log.jsonl`.
    pub fn joint_train<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<Vec<StepLog>> {
        std::fs::create_dir_all(&self.out_dir)?;
        let mut log_file = std::fs::File::create(self.out_dir.join("train_log.jsonl"))?;
        let mut logs = Vec::new();
        let mut optim: AdamW<T> = AdamW::new(self.cfg.train.lr, self.cfg.train.weight_decay);
        let mut rng = refseg_nn::rng::child(self.cfg.train.seed, 0x747261);

        let stages: [(&'static str, u64); 2] = [
            ("image", self.cfg.train.image_steps),
            ("video", self.cfg.train.video_steps),
        ];
        let mut global_step = 0u64;
        for (stage, steps) in stages {
            if stage == "video" && self.cfg.train.freeze_text_in_video_stage {
                store.set_frozen_prefix("text.", true);
            }
            let drop_at = (steps as f64 * self.cfg.train.lr_drop_frac) as u64;
            for step in 0..steps {
                let lr = if step >= drop_at {
                    self.cfg.train.lr * 0.1
                } else {
                    self.cfg.train.lr
                };
                optim.set_lr(lr);
                let sample = self.draw_sample(stage, &mut rng)?;
                let breakdown = self.train_step(store, &mut optim, &sample)?;
                if !breakdown.is_finite() {
                    return Err(CoreError::NonFiniteLoss {
                        step: global_step,
                        task: sample.refs_task.name().to_string(),
                        detail: format!("{breakdown:?}"),
                    });
                }
                global_step += 1;
                if step % self.cfg.train.log_every == 0 || step + 1 == steps {
                    let entry = StepLog {
                        step: global_step,
                        stage,
                        task: sample.refs_task.name().to_string(),
                        lr,
                        cls: breakdown.cls,
                        l1: breakdown.l1,
                        giou: breakdown.giou,
                        mask_bce: breakdown.mask_bce,
                        dice: breakdown.dice,
                        total: breakdown.total,
                    };
                    writeln!(log_file, "{}", serde_json::to_string(&entry)?)?;
                    logs.push(entry);
                }
            }
            let ckpt = match stage {
                "image" => self.out_dir.join("stage_image.ckpt"),
                _ => self.out_dir.join("model.ckpt"),
            };
            checkpoint::save_checkpoint(&ckpt, store, &self.cfg)?;
        }
        if self.cfg.train.freeze_text_in_video_stage {
            store.set_frozen_prefix("text.", false);
        }
        Ok(logs)
    }

    /// Sample a task by the stage's ratio table, then an instance of it.
    fn draw_sample(&self, stage: &str, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
        let ratios = if stage == "image" {
            &self.cfg.train.ratios_image
        } else {
            &self.cfg.train.ratios_video
        };
        let total: f64 = ratios.values().sum();
        if total <= 0.0 {
            return Err(CoreError::Config(format!(
                "no positive sampling ratios for stage {stage}"
            )));
        }
        let mut pick = rng.gen_range(0.0..total);
        let mut chosen = None;
        for (name, weight) in ratios {
            if *weight <= 0.0 {
                continue;
            }
            if pick < *weight {
                chosen = Some(name.clone());
                break;
            }
            pick -= weight;
        }
        let chosen = chosen.unwrap_or_else(|| ratios.keys().next().unwrap().clone());

        if chosen == "PSEUDO" {
            // 2-frame pseudo-video from a RIS still; keeps language grounding
            // alive during the video stage
            let inst = self.load_random(TaskKind::Ris, rng)?;
            let mut pseudo = pseudo_video(&inst.frames[0], &inst.gt_masks[0], rng);
            pseudo.task = TaskKind::Rvos;
            pseudo.language_tokens = inst.language_tokens.clone();
            return Ok(TrainSample {
                refs_task: TaskKind::Rvos,
                instance: pseudo,
                ref_frame_idx: Some(0),
                target_frame_idx: 1,
            });
        }

        let task: TaskKind = chosen.parse()?;
        let inst = self.load_random(task, rng)?;
        let (ref_idx, tgt_idx) = match task {
            TaskKind::Ris | TaskKind::Fss => (None, 0),
            _ => {
                // two distinct frames; the reference frame must have a
                // usable annotated mask
                let n = inst.frames.len();
                let candidates: Vec<usize> = (0..n)
                    .filter(|&t| inst.visibility[t] && !inst.gt_masks[t].is_empty())
                    .collect();
                let r = candidates[rng.gen_range(0..candidates.len())];
                let mut t = rng.gen_range(0..n);
                if n > 1 {
                    while t == r {
                        t = rng.gen_range(0..n);
                    }
                }
                (Some(r), t)
            }
        };
        Ok(TrainSample {
            refs_task: task,
            instance: inst,
            ref_frame_idx: ref_idx,
            target_frame_idx: tgt_idx,
        })
    }

    fn load_random(&self, task: TaskKind, rng: &mut ChaCha8Rng) -> Result<TaskInstance> {
        let count = corpus::count_instances(&self.corpus_root, "train", task);
        if count == 0 {
            return Err(CoreError::Corpus(format!(
                "corpus has no train instances for {}",
                task.name()
            )));
        }
        let idx = rng.gen_range(0..count);
        read_instance(&corpus::instance_dir(&self.corpus_root, "train", task, idx))
    }

    /// One optimization step on one sampled instance.
    fn train_step<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        optim: &mut AdamW<T>,
        sample: &TrainSample,
    ) -> Result<LossBreakdown> {
        let inst = &sample.instance;
        let target = sample.target_frame_idx;
        let s = Session::new(store);

        // build the reference list in fusion order
        let mut refs: Vec<RefInput<'_, T>> = Vec::new();
        let ref_pair = sample
            .ref_frame_idx
            .map(|ri| (&inst.frames[ri], &inst.gt_masks[ri]));
        match sample.refs_task {
            TaskKind::Ris => {
                refs.push(RefInput::Lang(inst.language_tokens.as_ref().unwrap()));
            }
            TaskKind::Fss => {
                refs.push(RefInput::Mask {
                    image: inst.reference_frame.as_ref().unwrap(),
                    mask: inst.reference_mask.as_ref().unwrap(),
                });
            }
            TaskKind::Vos => {
                let (img, m) = ref_pair.unwrap();
                refs.push(RefInput::Mask { image: img, mask: m });
            }
            TaskKind::Rvos => {
                let (img, m) = ref_pair.unwrap();
                let lang = RefInput::Lang(inst.language_tokens.as_ref().unwrap());
                if self.model.cfg.mask_ref_first {
                    refs.push(RefInput::Mask { image: img, mask: m });
                    refs.push(lang);
                } else {
                    refs.push(lang);
                    refs.push(RefInput::Mask { image: img, mask: m });
                }
            }
        }

        let kv = self.model.encode_refs(&s, &refs)?;
        let out = self.model.detect(&s, &inst.frames[target], &kv)?;
        let visible = inst.visibility[target] && inst.gt_boxes[target].is_some();
        let gt_box = if visible { inst.gt_boxes[target] } else { None };
        let gt_mask = if visible {
            Some(&inst.gt_masks[target])
        } else {
            None
        };

        // per-layer matching; mask terms only on the final layer
        let last = out.layers.len() - 1;
        let mut total_var = None;
        let mut final_breakdown = LossBreakdown::default();
        for (li, head) in out.layers.iter().enumerate() {
            let assignment: Option<Assignment> = if let Some(gtb) = gt_box.as_ref() {
                let vals = self.model.detection_values(&s, &out, li);
                let costs = losses::matching_cost(&vals.scores, &vals.boxes, gtb, &self.cfg.loss);
                let k = if self.cfg.loss.dynamic_k {
                    losses::dynamic_k(&vals.boxes, gtb)
                } else {
                    self.cfg.loss.topk
                }
                .min(self.model.cfg.queries);
                Some(losses::assign_topk(&costs, k)?)
            } else {
                None
            };
            let masks: Vec<PositiveMaskVars> = if li == last {
                assignment
                    .as_ref()
                    .map(|a| {
                        a.positive
                            .iter()
                            .map(|&qi| {
                                let (logits4, soft) =
                                    self.model.decode_query_mask(&s, &out, li, qi);
                                PositiveMaskVars { logits4, soft }
                            })
                            .collect()
                    })
                    .unwrap_or_default()
            } else {
                Vec::new()
            };
            let (var, breakdown) = losses::total_loss(
                &s,
                head.score_logits,
                head.boxes,
                &masks,
                assignment.as_ref(),
                gt_box.as_ref(),
                if li == last { gt_mask } else { None },
                &self.cfg.loss,
            );
            if li == last {
                final_breakdown = breakdown;
            }
            total_var = Some(match total_var {
                Some(acc) => s.tape.add(acc, var),
                None => var,
            });
        }
        let total_var = total_var.expect("at least one decoder layer");

        let mut grads = s.tape.backward(total_var);
        let mut param_grads = s.param_grads(&mut grads);
        drop(s);

        // global-norm clipping
        if self.cfg.train.grad_clip > 0.0 {
            let norm: f64 = param_grads
                .iter()
                .map(|(_, g)| g.iter().map(|&v| Scalar::to_f64(v).powi(2)).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.train.grad_clip {
                let scale = T::from_f64(self.cfg.train.grad_clip / norm);
                for (_, g) in &mut param_grads {
                    g.mapv_inplace(|v| v * scale);
                }
            }
        }
        optim.step(store, &param_grads);
        Ok(final_breakdown)
    }
}
