//! Manual benchmark of training throughput (ignored by default).
//! Run with: cargo test -p refseg-core --test train_bench -- --ignored --nocapture

use std::time::Instant;

use refseg_core::config::RunConfig;
use refseg_core::corpus::{generate_corpus, CorpusCfg};
use refseg_core::model::RefSegModel;
use refseg_core::trainer::Trainer;
use refseg_nn::ParamStore;

#[test]
#[ignore]
fn bench_train_steps() {
    let dir = std::env::temp_dir().join("refseg-bench");
    let corpus = dir.join("corpus");
    let mut cfg = RunConfig::default();
    cfg.data = CorpusCfg {
        seed: 3,
        canvas: (128, 128),
        video_frames: (6, 8),
        train_ris: 20,
        train_fss: 10,
        train_vos: 10,
        train_rvos: 10,
        eval_ris: 4,
        eval_fss: 4,
        eval_vos: 2,
        eval_rvos: 2,
    };
    if !corpus.join("meta.json").exists() {
        let t0 = Instant::now();
        generate_corpus(&corpus, &cfg.data).unwrap();
        println!("corpus generation: {:.1}s", t0.elapsed().as_secs_f64());
    }
    cfg.train.image_steps = 12;
    cfg.train.video_steps = 12;
    cfg.train.log_every = 1;

    let mut ps = ParamStore::<f32>::new();
    let model = RefSegModel::build(&mut ps, &cfg.model, cfg.train.seed);
    println!(
        "params: {} tensors, {:.2}M elements",
        ps.len(),
        ps.total_elements() as f64 / 1e6
    );
    let trainer = Trainer::new(cfg.clone(), &corpus, &dir.join("run"), &model);
    let t0 = Instant::now();
    let logs = trainer.joint_train(&mut ps).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "24 steps in {:.1}s -> {:.2} s/step; first loss {:.3}, last loss {:.3}",
        dt,
        dt / 24.0,
        logs.first().unwrap().total,
        logs.last().unwrap().total
    );
}

#[test]
#[ignore]
fn probe_ris_learning() {
    let dir = std::env::temp_dir().join("refseg-probe-ris");
    let corpus = dir.join("corpus");
    let mut cfg = RunConfig::default();
    cfg.data = CorpusCfg {
        seed: 3,
        canvas: (128, 128),
        video_frames: (6, 8),
        train_ris: 300,
        train_fss: 10,
        train_vos: 10,
        train_rvos: 10,
        eval_ris: 24,
        eval_fss: 2,
        eval_vos: 2,
        eval_rvos: 2,
    };
    if !corpus.join("meta.json").exists() {
        generate_corpus(&corpus, &cfg.data).unwrap();
    }
    cfg.train.image_steps = 900;
    cfg.train.video_steps = 0;
    cfg.train.ratios_image = [("RIS".to_string(), 1.0)].into_iter().collect();
    cfg.train.log_every = 100;

    let mut ps = ParamStore::<f32>::new();
    let model = RefSegModel::build(&mut ps, &cfg.model, cfg.train.seed);
    let trainer = Trainer::new(cfg.clone(), &corpus, &dir.join("run"), &model);
    let t0 = Instant::now();
    let logs = trainer.joint_train(&mut ps).unwrap();
    println!("train: {:.0}s", t0.elapsed().as_secs_f64());
    for l in &logs {
        println!(
            "step {:4} total {:7.3} cls {:6.3} l1 {:6.3} giou {:6.3} bce {:6.3} dice {:6.3}",
            l.step, l.total, l.cls, l.l1, l.giou, l.mask_bce, l.dice
        );
    }
    let outcome = refseg_core::evaluate::evaluate_task(
        &model,
        &ps,
        &corpus,
        "eval",
        refseg_core::tasks::TaskKind::Ris,
        &cfg.infer,
        1,
        None,
    )
    .unwrap();
    println!(
        "RIS eval: mIoU {:.3} oIoU {:.3} J {:.3} F {:.3}",
        outcome.report.miou, outcome.report.oiou, outcome.report.j, outcome.report.f
    );
}
