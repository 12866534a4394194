//! Integration checks of the encoder / fusion / detector stack: shape
//! contracts, zero-init identity, determinism, equivariances and an
//! end-to-end gradient check on a micro configuration.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refseg_core::config::{LossCfg, ModelCfg};
use refseg_core::losses::{self, PositiveMaskVars};
use refseg_core::mask::BinaryMask;
use refseg_core::model::{RefInput, RefSegModel};
use refseg_core::scene::{generate_scene, ObjectSpec, SceneSpec};
use refseg_core::vocab::{encode_expression, Color, ShapeKind};
use refseg_nn::gradcheck;
use refseg_nn::{ParamStore, Session};

fn small_cfg() -> ModelCfg {
    ModelCfg {
        dim: 32,
        queries: 8,
        enc_layers: 2,
        dec_layers: 2,
        heads: 4,
        tile: 16,
        ffn_dim: 64,
        text_layers: 1,
        dyn_channels: 8,
        stage_channels: [8, 16, 24, 32],
        mask_trunk_channels: [8, 8, 16, 16, 32],
        gn_groups: 8,
        ..Default::default()
    }
}

fn test_scene(h: usize, w: usize) -> refseg_core::scene::RenderedScene {
    let spec = SceneSpec {
        objects: vec![ObjectSpec {
            shape: ShapeKind::Circle,
            color: Color::Red,
            size_px: 9.0,
            start: (w as f64 / 2.0, h as f64 / 2.0),
            velocity: (1.0, 0.5),
            occlusion: None,
            disappear: None,
        }],
        height: h,
        width: w,
        frame_count: 2,
        rng_seed: 3,
    };
    generate_scene(&spec).unwrap()
}

#[test]
fn pyramid_level_sizes_follow_stride_arithmetic() {
    let cfg = small_cfg();
    let mut ps = ParamStore::<f32>::new();
    let model = RefSegModel::build(&mut ps, &cfg, 1);
    let s = Session::eval(&ps);
    let scene = test_scene(64, 64);
    let p = model.visual.encode_frame(&s, &scene.frames[0].image).unwrap();
    assert_eq!(p.hw, [(16, 16), (8, 8), (4, 4), (2, 2)]);
    for l in 0..4 {
        assert_eq!(s.tape.shape(p.levels[l])[0], cfg.dim);
    }
    // ceil arithmetic on non-multiple sizes
    let scene2 = test_scene(50, 70);
    let p2 = model.visual.encode_frame(&s, &scene2.frames[0].image).unwrap();
    assert_eq!(p2.hw[0], (13, 18));
    assert_eq!(p2.hw[3], (2, 3));
}

#[test]
fn encoders_deterministic_and_finite() {
    let cfg = small_cfg();
    let mut ps = ParamStore::<f32>::new();
    let model = RefSegModel::build(&mut ps, &cfg, 1);
    let scene = test_scene(64, 64);
    let img = &scene.frames[0].image;
    let s1 = Session::eval(&ps);
    let p1 = model.visual.encode_frame(&s1, img).unwrap();
    let s2 = Session::eval(&ps);
    let p2 = model.visual.encode_frame(&s2, img).unwrap();
    for l in 0..4 {
        let a = s1.tape.value(p1.levels[l]);
        let b = s2.tape.value(p2.levels[l]);
        assert_eq!(a, b, "level {l} not bit-identical across passes");
    }
    // all-zero image stays finite
    let zeros = Array3::<f32>::zeros((3, 64, 64));
    let s3 = Session::eval(&ps);
    let p3 = model.visual.encode_frame(&s3, &zeros).unwrap();
    for l in 0..4 {
        assert!(s3.tape.value(p3.levels[l]).iter().all(|v| v.is_finite()));
    }
}

#[test]
fn mask_reference_sequence_lengths_and_mask_independence() {
    let cfg = small_cfg();
    let mut ps = ParamStore::<f32>::new();
    let model = RefSegModel::build(&mut ps, &cfg, 1);
    let scene = test_scene(64, 64);
    let img = &scene.frames[0].image;
    let mask = &scene.frames[0].masks[0];
    let s = Session::eval(&ps);
    let pyr = model.visual.encode_frame(&s, img).unwrap();
    let feats = model
        .mask_enc
        .encode_mask_reference(&s, img, mask, &pyr)
        .unwrap();
    // strides 8/16/32 on 64x64 -> 64, 16, 4 tokens
    assert_eq!(s.tape.shape(feats.frame_tokens[0]), vec![64, cfg.dim]);
    assert_eq!(s.tape.shape(feats.frame_tokens[1]), vec![16, cfg.dim]);
    assert_eq!(s.tape.shape(feats.frame_tokens[2]), vec![4, cfg.dim]);
    for l in 0..3 {
        assert_eq!(
            s.tape.shape(feats.frame_tokens[l]),
            s.tape.shape(feats.mask_tokens[l])
        );
    }
    // a different mask changes values but not frame tokens
    let other = BinaryMask::zeros(64, 64);
    let feats2 = model
        .mask_enc
        .encode_mask_reference(&s, img, &other, &pyr)
        .unwrap();
    for l in 0..3 {
        assert_eq!(
            s.tape.value(feats.frame_tokens[l]),
            s.tape.value(feats2.frame_tokens[l]),
            "frame features must not read the mask"
        );
    }
    let diff: f32 = s
        .tape
        .value(feats.mask_tokens[0])
        .iter()
        .zip(s.tape.value(feats2.mask_tokens[0]).iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-3, "mask features must depend on the mask");
}

#[test]
fn text_encoder_contracts() {
    let cfg = small_cfg();
    let mut ps = ParamStore::<f32>::new();
    let model = RefSegModel::build(&mut ps, &cfg, 1);
    let s = Session::eval(&ps);
    let tokens = encode_expression(Some(Color::Red), Some(ShapeKind::Circle), None);
    let out = model.text_enc.encode_text(&s, &tokens).unwrap();
    assert_eq!(s.tape.shape(out.tokens), vec![tokens.len(), cfg.dim]);

    // padding invariance on non-pad positions
    let mut padded = tokens.clone();
    padded.extend([refseg_core::vocab::PAD; 5]);
    let out_p = model.text_enc.encode_text(&s, &padded).unwrap();
    let a = s.tape.value(out.tokens);
    let b = s.tape.value(out_p.tokens);
    for i in 0..tokens.len() {
        for c in 0..cfg.dim {
            assert!(
                (a[[i, c]] - b[[i, c]]).abs() < 1e-6,
                "padding changed token {i}"
            );
        }
    }

    // permuting content tokens changes the encoding (positions active)
    let swapped = {
        let mut t = tokens.clone();
        t.swap(1, 2);
        t
    };
    let out_s = model.text_enc.encode_text(&s, &swapped).unwrap();
    let diff: f32 = s
        .tape
        .value(out.tokens)
        .iter()
        .zip(s.tape.value(out_s.tokens).iter())
        .map(|(x, y)| (x - y).abs())
        .sum();
    assert!(diff > 1e-4);

    // out-of-vocab rejected
    assert!(model.text_enc.encode_text(&s, &[999]).is_err());
}

#[test]
fn unifusion_identity_at_init() {
    let cfg = small_cfg();
    let mut ps = ParamStore::<f32>::new();
    let model = RefSegModel::build(&mut ps, &cfg, 5);
    let scene = test_scene(64, 64);
    let img = &scene.frames[0].image;
    let mask = &scene.frames[0].masks[0];
    let s = Session::eval(&ps);
    let pyr = model.visual.encode_frame(&s, img).unwrap();
    let tokens = encode_expression(Some(Color::Red), Some(ShapeKind::Circle), None);
    let refs = model
        .encode_refs(
            &s,
            &[
                RefInput::Mask { image: img, mask },
                RefInput::Lang(&tokens),
            ],
        )
        .unwrap();
    let fused = {
        let refs_ref: Vec<&_> = refs.iter().collect();
        model.fusion.fuse_pyramid(&s, &pyr, &refs_ref).unwrap()
    };
    for l in 0..4 {
        let a = s.tape.value(pyr.levels[l]);
        let b = s.tape.value(fused.levels[l]);
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert_eq!(max_diff, 0.0, "level {l} not an exact identity at init");
    }
}

#[test]
fn unifusion_reference_permutation_invariance() {
    // language reference: no position encoding on keys, so jointly
    // permuting key/value rows must not change the fused output
    let cfg = small_cfg();
    let mut ps = ParamStore::<f32>::new();
    let model = RefSegModel::build(&mut ps, &cfg, 5);
    // make the fusion non-trivial: nudge the modulation head off zero
    let mid = ps.find("fusion.modulation.w").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for v in ps.value_mut(mid).iter_mut() {
        *v = rng.gen_range(-0.05..0.05);
    }
    let scene = test_scene(64, 64);
    let img = &scene.frames[0].image;
    let s = Session::eval(&ps);
    let pyr = model.visual.encode_frame(&s, img).unwrap();

    let lang_tokens = {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        Array2::<f32>::from_shape_simple_fn((6, cfg.dim), || rng.gen_range(-1.0..1.0))
    };
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permuted = {
        let mut p = lang_tokens.clone();
        for (dst, &src) in perm.iter().enumerate() {
            p.row_mut(dst).assign(&lang_tokens.row(src));
        }
        p
    };
    let out = |toks: &Array2<f32>| {
        let lang = refseg_core::encoders::LanguageFeatures {
            tokens: s.tape.leaf(toks.clone().into_dyn().mapv(|v| v)),
            valid: vec![true; 6],
        };
        let kv = refseg_core::unifusion::ReferenceKV::from_language(&lang);
        let fused = model.fusion.fuse_pyramid(&s, &pyr, &[&kv]).unwrap();
        s.tape.value(fused.levels[1])
    };
    let a = out(&lang_tokens);
    let b = out(&permuted);
    let max_diff = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff < 1e-6, "permutation changed output by {max_diff}");
}

#[test]
fn detector_token_count_and_head_shapes() {
    let cfg = ModelCfg {
        queries: 8,
        enc_layers: 1,
        dec_layers: 1,
        ..small_cfg()
    };
    let mut ps = ParamStore::<f32>::new();
    let model = RefSegModel::build(&mut ps, &cfg, 2);
    let scene = test_scene(128, 128);
    let img = &scene.frames[0].image;
    let mask = &scene.frames[0].masks[0];
    let s = Session::eval(&ps);
    let refs = model
        .encode_refs(&s, &[RefInput::Mask { image: img, mask }])
        .unwrap();
    let out = model.detect(&s, img, &refs).unwrap();
    // 128x128: strides 8/16/32 -> 256 + 64 + 16 = 336 memory tokens
    let pyr = model.visual.encode_frame(&s, img).unwrap();
    let mem = model.detector.encode_multiscale(&s, &pyr);
    assert_eq!(s.tape.shape(mem.tokens), vec![336, cfg.dim]);

    let head = out.layers.last().unwrap();
    assert_eq!(s.tape.shape(head.score_logits), vec![8, 1]);
    assert_eq!(s.tape.shape(head.boxes), vec![8, 4]);
    assert_eq!(s.tape.shape(head.kernels), vec![8, cfg.kernel_len()]);
    // F_seg at stride 4
    assert_eq!(s.tape.shape(out.f_seg), vec![cfg.dim, 32, 32]);
    // soft mask upsamples to the full resolution, strictly inside (0,1)
    let (_, soft) = model.decode_query_mask(&s, &out, out.layers.len() - 1, 0);
    assert_eq!(s.tape.shape(soft), vec![1, 128, 128]);
    assert!(s
        .tape
        .value(soft)
        .iter()
        .all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn zeroed_heads_give_neutral_predictions() {
    let cfg = small_cfg();
    let mut ps = ParamStore::<f32>::new();
    let model = RefSegModel::build(&mut ps, &cfg, 2);
    for name in [
        "det.cls_head.w",
        "det.cls_head.b",
        "det.box_head.2.w",
        "det.box_head.2.b",
        "det.kernel_head.w",
        "det.kernel_head.b",
    ] {
        let id = ps.find(name).unwrap();
        ps.value_mut(id).fill(0.0);
    }
    let scene = test_scene(64, 64);
    let img = &scene.frames[0].image;
    let mask = &scene.frames[0].masks[0];
    let s = Session::eval(&ps);
    let refs = model
        .encode_refs(&s, &[RefInput::Mask { image: img, mask }])
        .unwrap();
    let out = model.detect(&s, img, &refs).unwrap();
    let vals = model.detection_values(&s, &out, out.layers.len() - 1);
    for (score, b) in vals.scores.iter().zip(vals.boxes.iter()) {
        assert!((score - 0.5).abs() < 1e-6, "sigmoid(0) scores");
        for c in b {
            assert!((c - 0.5).abs() < 1e-6, "sigmoid(0) boxes");
        }
    }
    // zero kernels -> soft mask identically 0.5
    let (_, soft) = model.decode_query_mask(&s, &out, out.layers.len() - 1, 0);
    assert!(s.tape.value(soft).iter().all(|&v| (v - 0.5).abs() < 1e-6));
}

#[test]
fn query_permutation_equivariance() {
    let cfg = small_cfg();
    let mut ps = ParamStore::<f32>::new();
    let model = RefSegModel::build(&mut ps, &cfg, 2);
    let scene = test_scene(64, 64);
    let img = &scene.frames[0].image;
    let mask = &scene.frames[0].masks[0];

    let run = |ps: &ParamStore<f32>| {
        let s = Session::eval(ps);
        let refs = model
            .encode_refs(&s, &[RefInput::Mask { image: img, mask }])
            .unwrap();
        let out = model.detect(&s, img, &refs).unwrap();
        let v = model.detection_values(&s, &out, out.layers.len() - 1);
        (v.scores, v.boxes)
    };
    let (scores0, boxes0) = run(&ps);

    // permute the learned query embeddings
    let qid = ps.find("det.query_pos").unwrap();
    let orig = ps.value(qid).clone();
    let n = orig.shape()[0];
    let perm: Vec<usize> = (0..n).map(|i| (i + 3) % n).collect();
    {
        let value = ps.value_mut(qid);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..orig.shape()[1] {
                value[[dst, c]] = orig[[src, c]];
            }
        }
    }
    let (scores1, boxes1) = run(&ps);
    for (dst, &src) in perm.iter().enumerate() {
        assert!((scores1[dst] - scores0[src]).abs() < 2e-5);
        for c in 0..4 {
            assert!((boxes1[dst][c] - boxes0[src][c]).abs() < 2e-5);
        }
    }
}

#[test]
fn end_to_end_micro_gradient_check() {
    // C=8, N=2, 16x16 input, 1 enc/1 dec layer, refs = mask + language:
    // exercises encoders, fusion, detector and all loss terms at once.
    let cfg = ModelCfg {
        dim: 8,
        queries: 2,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        tile: 8,
        ffn_dim: 16,
        text_layers: 1,
        dyn_channels: 4,
        stage_channels: [4, 8, 8, 8],
        mask_trunk_channels: [4, 4, 8, 8, 8],
        gn_groups: 4,
        ..Default::default()
    };
    let mut ps = ParamStore::<f64>::new();
    let model = RefSegModel::build(&mut ps, &cfg, 11);
    // nudge the zero-initialized modulation head so gradients reach the
    // reference encoders (at exact zero-init the gate blocks them by design)
    {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for name in ["fusion.modulation.w", "fusion.modulation.b"] {
            let id = ps.find(name).unwrap();
            for v in ps.value_mut(id).iter_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    let scene = {
        let spec = SceneSpec {
            objects: vec![ObjectSpec {
                shape: ShapeKind::Square,
                color: Color::Green,
                size_px: 4.0,
                start: (8.0, 8.0),
                velocity: (0.0, 0.0),
                occlusion: None,
                disappear: None,
            }],
            height: 16,
            width: 16,
            frame_count: 1,
            rng_seed: 1,
        };
        generate_scene(&spec).unwrap()
    };
    let img = scene.frames[0].image.clone();
    let mask = scene.frames[0].masks[0].clone();
    let gt_box = scene.frames[0].boxes[0].unwrap();
    let tokens = encode_expression(Some(Color::Green), Some(ShapeKind::Square), None);
    let loss_cfg = LossCfg {
        topk: 1,
        ..Default::default()
    };

    // fix the assignment from the initial forward so the loss is smooth
    let assignment = {
        let s = Session::eval(&ps);
        let refs = model
            .encode_refs(
                &s,
                &[
                    RefInput::Mask {
                        image: &img,
                        mask: &mask,
                    },
                    RefInput::Lang(&tokens),
                ],
            )
            .unwrap();
        let out = model.detect(&s, &img, &refs).unwrap();
        let vals = model.detection_values(&s, &out, out.layers.len() - 1);
        let costs = losses::matching_cost(&vals.scores, &vals.boxes, &gt_box, &loss_cfg);
        losses::assign_topk(&costs, 1).unwrap()
    };

    // build the loss inside a caller-provided session
    let build_loss = |s: &Session<'_, f64>| {
        let refs = model
            .encode_refs(
                s,
                &[
                    RefInput::Mask {
                        image: &img,
                        mask: &mask,
                    },
                    RefInput::Lang(&tokens),
                ],
            )
            .unwrap();
        let out = model.detect(s, &img, &refs).unwrap();
        let last = out.layers.len() - 1;
        let masks: Vec<PositiveMaskVars> = assignment
            .positive
            .iter()
            .map(|&qi| {
                let (logits4, soft) = model.decode_query_mask(s, &out, last, qi);
                PositiveMaskVars { logits4, soft }
            })
            .collect();
        let head = &out.layers[last];
        let (total, _) = losses::total_loss(
            s,
            head.score_logits,
            head.boxes,
            &masks,
            Some(&assignment),
            Some(&gt_box),
            Some(&mask),
            &loss_cfg,
        );
        total
    };

    let analytic = {
        let s = Session::new(&ps);
        let total = build_loss(&s);
        let mut grads = s.tape.backward(total);
        s.param_grads(&mut grads)
    };

    // >= 20 coordinates spread over every component
    let prefixes = [
        "visual.", "maskenc.", "text.", "fusion.q", "fusion.modulation", "det.",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut coords = Vec::new();
    for prefix in prefixes {
        let mut named: Vec<_> = analytic
            .iter()
            .filter(|(id, g)| {
                ps.name(*id).starts_with(prefix) && g.iter().any(|&v| v.abs() > 1e-8)
            })
            .collect();
        named.sort_by_key(|(id, _)| id.0);
        for _ in 0..4.min(named.len()) {
            let (id, g) = named[rng.gen_range(0..named.len())];
            // favor coordinates with non-negligible gradient magnitude
            let candidates: Vec<usize> = g
                .iter()
                .enumerate()
                .filter(|(_, v)| v.abs() > 1e-7)
                .map(|(i, _)| i)
                .collect();
            let flat = if candidates.is_empty() {
                rng.gen_range(0..g.len())
            } else {
                candidates[rng.gen_range(0..candidates.len())]
            };
            coords.push((*id, flat));
        }
    }
    assert!(coords.len() >= 20, "only {} coords picked", coords.len());

    let mut ps_mut = ps;
    let results = gradcheck::check_coords(
        &mut ps_mut,
        &coords,
        &analytic,
        1e-5,
        |store| {
            let s = Session::eval(store);
            let total = build_loss(&s);
            s.tape.scalar(total)
        },
    );
    for r in &results {
        assert!(
            r.rel_err < 1e-3,
            "{}[{}]: analytic {:.8e} vs numeric {:.8e} (rel {:.2e})",
            r.param,
            r.flat_index,
            r.analytic,
            r.numeric,
            r.rel_err
        );
    }
}
