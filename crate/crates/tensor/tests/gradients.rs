//! Finite-difference checks of every backward rule, in 64-bit.

use bicap_tensor::{grad_check, BatchNormState, Mode, Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Weighted sum so that every output coordinate carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.input(randn(&shape, seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn matmul_gradients() {
    let err = grad_check(
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 99)
        },
        &[randn(&[4, 5], 1), randn(&[5, 3], 2)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "matmul rel err {err}");
}

#[test]
fn batched_and_transposed_matmul_gradients() {
    let err = grad_check(
        |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            let z = t.matmul_ex(y, v[2], true, false)?;
            weighted_sum(t, z, 5)
        },
        &[randn(&[2, 3, 4], 1), randn(&[2, 5, 4], 2), randn(&[3, 2], 3)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "batched matmul rel err {err}");
}

#[test]
fn conv2d_gradients() {
    let err = grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            weighted_sum(t, y, 17)
        },
        &[randn(&[2, 3, 8, 8], 1), randn(&[4, 3, 3, 3], 2), randn(&[4], 3)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "conv2d rel err {err}");
}

#[test]
fn pointwise_conv_gradients() {
    let err = grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, 0)?;
            weighted_sum(t, y, 4)
        },
        &[randn(&[2, 3, 4, 4], 1), randn(&[5, 3, 1, 1], 2)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "1x1 conv rel err {err}");
}

#[test]
fn batch_norm_training_gradients() {
    let err = grad_check(
        |t, v| {
            let mut state = BatchNormState::new(3);
            let y = t.batch_norm2d(v[0], v[1], v[2], &mut state, Mode::Train)?;
            weighted_sum(t, y, 8)
        },
        &[randn(&[2, 3, 3, 3], 1), randn(&[3], 2), randn(&[3], 3)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-5, "batch norm rel err {err}");
}

#[test]
fn batch_norm_eval_gradients() {
    let err = grad_check(
        |t, v| {
            let mut state = BatchNormState::new(2);
            state.running_mean.data_mut().copy_from_slice(&[0.3, -0.2]);
            state.running_var.data_mut().copy_from_slice(&[1.5, 0.7]);
            let y = t.batch_norm2d(v[0], v[1], v[2], &mut state, Mode::Eval)?;
            weighted_sum(t, y, 8)
        },
        &[randn(&[2, 2, 2, 2], 1), randn(&[2], 2), randn(&[2], 3)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "eval batch norm rel err {err}");
}

#[test]
fn layer_norm_gradients() {
    let err = grad_check(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 21)
        },
        &[randn(&[3, 6], 1), randn(&[6], 2), randn(&[6], 3)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "layer norm rel err {err}");
}

#[test]
fn gelu_gradients_on_random_points() {
    let x = Tensor::uniform(&[100], -4.0, 4.0, &mut rng(11));
    let err = grad_check(
        |t, v| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y, 2)
        },
        &[x],
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-6, "gelu rel err {err}");
}

#[test]
fn relu_and_scale_gradients() {
    // keep inputs away from the kink
    let x = Tensor::<f64>::uniform(&[20], 0.1, 1.0, &mut rng(3)).map(|v| if v > 0.55 { v } else { -v });
    let err = grad_check(
        |t, v| {
            let y = t.relu(v[0]);
            let y = t.scale(y, -2.5);
            weighted_sum(t, y, 2)
        },
        &[x],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-8, "relu rel err {err}");
}

#[test]
fn softmax_gradients_both_axes() {
    for axis in 0..2 {
        let err = grad_check(
            |t, v| {
                let y = t.softmax(v[0], axis)?;
                weighted_sum(t, y, 30)
            },
            &[randn(&[3, 4], 1)],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "softmax axis {axis} rel err {err}");
    }
}

#[test]
fn log_softmax_and_soft_cross_entropy_gradients() {
    let q: Vec<f64> = vec![0.5, 0.0, 0.5, 0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
    let err = grad_check(
        |t, v| {
            let l = t.soft_cross_entropy(v[0], &q)?;
            let y = t.log_softmax(v[0])?;
            let s = weighted_sum(t, y, 3)?;
            t.add(l, s)
        },
        &[randn(&[2, 4], 1)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "log-softmax rel err {err}");
}

#[test]
fn cross_entropy_gradients() {
    let err = grad_check(
        |t, v| t.cross_entropy(v[0], &[1, 4, 0, 2], Some(4)),
        &[randn(&[4, 5], 9)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "cross entropy rel err {err}");
}

#[test]
fn embedding_gradients() {
    let err = grad_check(
        |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 1])?;
            weighted_sum(t, y, 6)
        },
        &[randn(&[3, 4], 1)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-8, "embedding rel err {err}");
}

#[test]
fn shape_op_gradients() {
    let err = grad_check(
        |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let r = t.reshape(p, &[4, 6])?;
            let m = t.mean_axis(r, 0)?;
            let pooled = t.max_pool2d(v[1], 3, 2, 1)?;
            let a = weighted_sum(t, m, 4)?;
            let b = weighted_sum(t, pooled, 5)?;
            let s = t.sub(a, b)?;
            t.mean(s)
        },
        &[randn(&[2, 3, 4], 1), randn(&[1, 2, 5, 5], 2)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "shape ops rel err {err}");
}

#[test]
fn broadcast_binary_gradients() {
    let err = grad_check(
        |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.mul(a, v[2])?;
            let c = t.sub(b, v[1])?;
            weighted_sum(t, c, 7)
        },
        &[randn(&[2, 3, 4], 1), randn(&[4], 2), randn(&[3, 1], 3)],
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-6, "broadcast rel err {err}");
}

#[test]
fn dropout_gradients_with_replayed_mask() {
    let err = grad_check(
        |t, v| {
            let mut r = rng(5);
            let y = t.dropout(v[0], 0.3, Mode::Train, &mut r)?;
            weighted_sum(t, y, 1)
        },
        &[randn(&[30], 1)],
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-8, "dropout rel err {err}");
}

#[test]
fn grad_check_of_sum_is_exact() {
    let err = grad_check(|t, v| Ok(t.sum(v[0])), &[randn(&[10], 1)], 1e-3).unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn grad_check_rejects_nonpositive_step() {
    assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[randn(&[2], 1)], 0.0).is_err());
}

#[test]
fn grad_check_detects_a_wrong_backward_rule() {
    // square with a deliberately wrong derivative (x instead of 2x)
    let err = grad_check(
        |t, v| {
            let x = t.value(v[0]).to_vec();
            let y: Vec<f64> = x.iter().map(|a| a * a).collect();
            let shape = t.shape(v[0]).to_vec();
            let sq = t.custom(
                &[v[0]],
                &shape,
                y,
                Box::new(|inputs, _out, g| {
                    vec![inputs[0].iter().zip(g).map(|(x, g)| x * g).collect()]
                }),
            )?;
            Ok(t.sum(sq))
        },
        &[randn(&[5], 2)],
        1e-6,
    )
    .unwrap();
    assert!(err > 1e-2, "negative control not detected: {err}");
}

#[test]
fn sum_and_square_gradients() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
    let s = tape.sum(x);
    assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap(), &[1.0, 1.0, 1.0]);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::ones(&[2]).with_grad());
    assert!(tape.backward(x).is_err());
}

#[test]
fn fan_out_gradients_sum_over_consumers() {
    let x0 = randn(&[4], 3);
    let branch = |which: u8| {
        let mut tape = Tape::new();
        let x = tape.input(x0.clone().with_grad());
        let a = tape.gelu(x);
        let a = tape.sum(a);
        let b = tape.mul(x, x).unwrap();
        let b = tape.sum(b);
        let loss = match which {
            0 => a,
            1 => b,
            _ => tape.add(a, b).unwrap(),
        };
        tape.backward(loss).unwrap().wrt(x).unwrap().to_vec()
    };
    let (ga, gb, both) = (branch(0), branch(1), branch(2));
    for i in 0..4 {
        assert!((ga[i] + gb[i] - both[i]).abs() < 1e-14);
    }
}

#[test]
fn repeated_backward_accumulates_into_tensor_slot() {
    let mut param = Tensor::new(&[2], vec![1.0, 3.0]).unwrap().with_grad();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let x = tape.leaf(&param);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        grads.accumulate_into(x, &mut param).unwrap();
    }
    assert_eq!(param.grad().unwrap(), &[4.0, 12.0]);
}

#[test]
fn tensors_not_requiring_grad_get_none() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::ones(&[2]).with_grad());
    let c = tape.input(Tensor::ones(&[2]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(c).is_none());
    assert!(g.wrt(x).is_some());
}
