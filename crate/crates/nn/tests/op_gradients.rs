//! Finite-difference checks for every tape operation, in double precision.
//!
//! Each case builds a scalar loss from the op under test, computes analytic
//! gradients via the tape, and compares against central differences.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refseg_nn::gradcheck::rel_err;
use refseg_nn::ops::AttentionCfg;
use refseg_nn::{Tape, Var};

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
}

fn randn_pos(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(0.1..1.0))
}

/// Check d(loss)/d(input_i) for every input coordinate, where the loss is a
/// fixed random weighting of the op output (so every output element matters).
fn check_op(inputs: &[ArrayD<f64>], op: impl Fn(&Tape<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // forward once to learn the output shape
    let tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = op(&tape, &vars);
    let w = randn(&mut rng, &tape.shape(out));

    let loss_of = |xs: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = op(&tape, &vars);
        let wv = tape.leaf(w.clone());
        let prod = tape.mul(out, wv);
        tape.scalar(tape.sum_all(prod))
    };

    // analytic
    let tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = op(&tape, &vars);
    let wv = tape.leaf(w.clone());
    let prod = tape.mul(out, wv);
    let loss = tape.sum_all(prod);
    let grads = tape.backward(loss);

    let mut xs: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.as_standard_layout().into_owned())
            .unwrap_or_else(|| ArrayD::zeros(inputs[i].raw_dim()));
        let n = inputs[i].len();
        // probe at most 24 coordinates per input to keep runtime sane
        let stride = (n / 24).max(1);
        for flat in (0..n).step_by(stride) {
            let orig = xs[i].as_slice().unwrap()[flat];
            xs[i].as_slice_mut().unwrap()[flat] = orig + H;
            let plus = loss_of(&xs);
            xs[i].as_slice_mut().unwrap()[flat] = orig - H;
            let minus = loss_of(&xs);
            xs[i].as_slice_mut().unwrap()[flat] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let ana = analytic.as_slice().unwrap()[flat];
            let err = rel_err(ana, numeric);
            assert!(
                err < TOL,
                "input {i} coord {flat}: analytic {ana:.9} vs numeric {numeric:.9} (rel {err:.2e})"
            );
        }
    }
}

#[test]
fn elementwise_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn_pos(&mut rng, &[3, 4]);
    check_op(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check_op(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check_op(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check_op(&[a.clone(), b.clone()], |t, v| t.div(v[0], v[1]));
    check_op(&[a.clone(), b.clone()], |t, v| t.maximum(v[0], v[1]));
    check_op(&[a, b], |t, v| t.minimum(v[0], v[1]));
}

#[test]
fn elementwise_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&mut rng, &[4, 5]);
    let p = randn_pos(&mut rng, &[4, 5]);
    check_op(&[a.clone()], |t, v| t.neg(v[0]));
    check_op(&[a.clone()], |t, v| t.scale(v[0], 1.7));
    check_op(&[a.clone()], |t, v| t.add_scalar(v[0], -0.3));
    check_op(&[a.clone()], |t, v| t.sigmoid(v[0]));
    check_op(&[a.clone()], |t, v| t.exp(v[0]));
    check_op(&[p.clone()], |t, v| t.ln(v[0]));
    check_op(&[p.clone()], |t, v| t.sqrt(v[0]));
    check_op(&[p.clone()], |t, v| t.powf_const(v[0], 2.0));
    check_op(&[p], |t, v| t.powf_const(v[0], 0.5));
    // relu/abs/clamp kink at 0: shift inputs away from it
    let shifted = a.mapv(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
    check_op(&[shifted.clone()], |t, v| t.relu(v[0]));
    check_op(&[shifted.clone()], |t, v| t.abs(v[0]));
    check_op(&[shifted], |t, v| t.clamp(v[0], -0.5, 0.5));
}

#[test]
fn matmul_and_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = randn(&mut rng, &[3, 5]);
    let b = randn(&mut rng, &[5, 4]);
    check_op(&[a.clone(), b], |t, v| t.matmul(v[0], v[1]));
    let w = randn(&mut rng, &[5, 6]);
    let bias = randn(&mut rng, &[6]);
    check_op(&[a, w, bias], |t, v| t.linear(v[0], v[1], v[2]));
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[4, 6]);
    let v = randn(&mut rng, &[6]);
    check_op(&[x.clone(), v.clone()], |t, vs| t.add_row(vs[0], vs[1]));
    check_op(&[x, v], |t, vs| t.mul_row(vs[0], vs[1]));
    let xc = randn(&mut rng, &[3, 4, 5]);
    let vc = randn(&mut rng, &[3]);
    let sp = randn(&mut rng, &[4, 5]);
    check_op(&[xc.clone(), vc.clone()], |t, vs| t.mul_channel(vs[0], vs[1]));
    check_op(&[xc.clone(), vc], |t, vs| t.add_channel(vs[0], vs[1]));
    check_op(&[xc, sp], |t, vs| t.mul_spatial(vs[0], vs[1]));
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[5, 3]);
    check_op(&[x.clone()], |t, v| t.sum_all(v[0]));
    check_op(&[x.clone()], |t, v| t.mean_all(v[0]));
    let valid = vec![true, false, true, true, false];
    check_op(&[x], |t, v| t.mean_rows_masked(v[0], &valid));
    let xc = randn(&mut rng, &[3, 4, 4]);
    check_op(&[xc.clone()], |t, v| t.mean_spatial(v[0]));
    check_op(&[xc.clone()], |t, v| t.max_spatial(v[0]));
    check_op(&[xc.clone()], |t, v| t.mean_channelwise(v[0]));
    check_op(&[xc], |t, v| t.max_channelwise(v[0]));
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[4, 6]);
    check_op(&[x.clone()], |t, v| t.reshape(v[0], &[2, 12]));
    check_op(&[x.clone()], |t, v| t.transpose2(v[0]));
    check_op(&[x.clone()], |t, v| t.slice_axis_op(v[0], 1, 1, 4));
    check_op(&[x.clone()], |t, v| t.gather_rows(v[0], &[0, 2, 2, 3]));
    let y = randn(&mut rng, &[2, 6]);
    check_op(&[x, y], |t, v| t.concat(&[v[0], v[1]], 0));
    let c = randn(&mut rng, &[3, 4, 5]);
    check_op(&[c.clone()], |t, v| t.chw_to_tokens(v[0]));
    let tok = randn(&mut rng, &[20, 3]);
    check_op(&[tok], |t, v| t.tokens_to_chw(v[0], 4, 5));
}

#[test]
fn conv_and_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[2, 6, 7]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    let b = randn(&mut rng, &[3]);
    check_op(&[x.clone(), w.clone(), b.clone()], |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 1)
    });
    check_op(&[x.clone(), w, b], |t, v| t.conv2d(v[0], v[1], v[2], 2, 1));
    let w1 = randn(&mut rng, &[4, 2, 1, 1]);
    let b1 = randn(&mut rng, &[4]);
    check_op(&[x.clone(), w1, b1], |t, v| t.conv2d(v[0], v[1], v[2], 1, 0));
    check_op(&[x.clone()], |t, v| t.upsample_nearest2(v[0]));
    check_op(&[x.clone()], |t, v| t.upsample_bilinear(v[0], 2));
    check_op(&[x], |t, v| t.upsample_bilinear(v[0], 4));
}

#[test]
fn norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[5, 8]);
    let gamma = randn_pos(&mut rng, &[8]);
    let beta = randn(&mut rng, &[8]);
    check_op(&[x, gamma, beta], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    let xc = randn(&mut rng, &[4, 3, 5]);
    let gc = randn_pos(&mut rng, &[4]);
    let bc = randn(&mut rng, &[4]);
    check_op(&[xc, gc, bc], |t, v| {
        t.group_norm(v[0], v[1], v[2], 2, 1e-5)
    });
}

#[test]
fn embedding_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let table = randn(&mut rng, &[7, 4]);
    check_op(&[table], |t, v| t.embedding(v[0], &[1, 3, 3, 0]));
}

#[test]
fn bce_with_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randn(&mut rng, &[4, 4]);
    let target = ArrayD::from_shape_simple_fn(IxDyn(&[4, 4]), || {
        if rng.gen_bool(0.5) {
            1.0
        } else {
            0.0
        }
    });
    check_op(&[x], |t, v| t.bce_with_logits_mean(v[0], &target));
}

#[test]
fn attention_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (nq, nk, heads, tile) in [(3, 5, 1, 2), (4, 7, 2, 3), (2, 6, 2, 64), (5, 4, 4, 1)] {
        let q = randn(&mut rng, &[nq, 8]);
        let k = randn(&mut rng, &[nk, 8]);
        let v = randn(&mut rng, &[nk, 8]);
        check_op(&[q.clone(), k.clone(), v.clone()], |t, vs| {
            t.attention(vs[0], vs[1], vs[2], AttentionCfg { heads, tile }, None)
        });
        // with some invalid keys
        let valid: Vec<bool> = (0..nk).map(|i| i % 3 != 1).collect();
        check_op(&[q, k, v], |t, vs| {
            t.attention(
                vs[0],
                vs[1],
                vs[2],
                AttentionCfg { heads, tile },
                Some(&valid),
            )
        });
    }
}

#[test]
fn grad_accumulates_over_shared_use() {
    // y = x*x + x: dy/dx = 2x + 1
    let tape = Tape::<f64>::new();
    let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
    let sq = tape.mul(x, x);
    let y = tape.add(sq, x);
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss);
    let g = grads.get(x).unwrap().as_slice().unwrap()[0];
    assert!((g - 7.0).abs() < 1e-12);
}

#[test]
fn eval_tape_records_no_backward() {
    let tape = Tape::<f64>::eval();
    let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
    let y = tape.mul(x, x);
    assert_eq!(tape.shape(y), vec![2, 2]);
}
