//! Forward examples and central finite-difference gradient checks for every
//! differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::ops::RunningStats;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Max guarded-relative error between the tape gradients of `build`'s scalar
/// output and central finite differences, over every element of every input.
fn fd_max_rel_err<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> VarId,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
        })
        .collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

fn weights_for(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    rand_tensor(shape, -1.0, 1.0, rng)
}

#[test]
fn conv2d_identity_kernel() {
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]);
    let y = ops::conv2d(&x, &k, 1, 0).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv2d_counting_kernel() {
    let x = Tensor::from_vec(&[1, 1, 5, 5], vec![1.0; 25]);
    let k = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]);
    let y = ops::conv2d(&x, &k, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert!(y.data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv2d_rejects_bad_arithmetic_and_channels() {
    let x = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
    let k = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    // (5 - 2) % 2 != 0
    assert!(ops::conv2d(&x, &k, 2, 0).is_err());
    let k = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
    assert!(ops::conv2d(&x, &k, 1, 0).is_err());
}

#[test]
fn conv_transpose_of_single_pixel_is_kernel() {
    let x = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]);
    let k = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let y = ops::conv_transpose2d(&x, &k, 2, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), k.data());
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for &(stride, padding) in &[(1usize, 0usize), (2, 1), (2, 0)] {
        let x = rand_tensor(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
        let k = rand_tensor(&[4, 3, 4, 4], -1.0, 1.0, &mut rng);
        let cx = match ops::conv2d(&x, &k, stride, padding) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let y = rand_tensor(cx.shape(), -1.0, 1.0, &mut rng);
        let ty = ops::conv_transpose2d(&y, &k, stride, padding).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0),
            "stride {stride} pad {padding}: {lhs} vs {rhs}"
        );
    }
}

#[test]
fn batchnorm_normalizes_and_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = rand_tensor(&[2, 3, 4, 4], -2.0, 5.0, &mut rng);
    let gamma = Tensor::from_vec(&[3], vec![1.0; 3]);
    let beta = Tensor::from_vec(&[3], vec![0.0; 3]);
    let (y, stats) = ops::batchnorm2d_train(&x, &gamma, &beta).unwrap();
    for c in 0..3 {
        let mut vals = Vec::new();
        for n in 0..2 {
            for p in 0..16 {
                vals.push(y.data()[(n * 3 + c) * 16 + p]);
            }
        }
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
    }
    assert_eq!(stats.count, 32);

    let gamma = Tensor::from_vec(&[3], vec![2.0; 3]);
    let beta = Tensor::from_vec(&[3], vec![3.0; 3]);
    let (y2, _) = ops::batchnorm2d_train(&x, &gamma, &beta).unwrap();
    for (a, b) in y.data().iter().zip(y2.data()) {
        assert!((2.0 * a + 3.0 - b).abs() < 1e-9);
    }
}

#[test]
fn batchnorm_rejects_degenerate_batch() {
    let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
    let gamma = Tensor::from_vec(&[2], vec![1.0; 2]);
    let beta = Tensor::from_vec(&[2], vec![0.0; 2]);
    assert!(ops::batchnorm2d_train(&x, &gamma, &beta).is_err());
}

#[test]
fn pointwise_basics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]), true);
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sigmoid(x);
    assert!((tape.value(s).data()[1] - 0.5).abs() < 1e-15);
    let l = tape.leaky_relu(x, 0.2);
    assert_eq!(tape.value(l).data(), &[-0.2, 0.0, 2.0]);
}

#[test]
fn relu_gradient_is_zero_on_negative_input() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[4], vec![-3.0, -1.0, -0.5, -2.0]), true);
    let r = tape.relu(x);
    let w = Tensor::from_vec(&[4], vec![1.0; 4]);
    let loss = tape.sum_weighted(r, w).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn maxpool_first_found_tie_and_routing() {
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![5.0, 5.0, 3.0, 1.0]);
    let (y, argmax) = ops::maxpool2d(&x, 2, 2).unwrap();
    assert_eq!(y.data(), &[5.0]);
    assert_eq!(argmax, vec![0]);

    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let p = tape.maxpool2d(xv, 2, 2).unwrap();
    let loss = tape.sum_weighted(p, Tensor::from_vec(&[1, 1, 1, 1], vec![2.0])).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xv).unwrap().data(), &[2.0, 0.0, 0.0, 0.0]);
}

#[test]
fn bce_reference_values() {
    let pred = Tensor::from_vec(&[4], vec![0.5; 4]);
    let target = Tensor::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]);
    let loss = ops::bce_loss(&pred, &target).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

    let pred = Tensor::from_vec(&[2], vec![1.0, 1.0]);
    let target = Tensor::from_vec(&[2], vec![1.0, 1.0]);
    let loss = ops::bce_loss(&pred, &target).unwrap();
    assert!(loss > 0.0 && loss < 1e-6, "clamped loss {loss}");

    let bad = Tensor::from_vec(&[3], vec![0.5; 3]);
    assert!(ops::bce_loss(&pred, &bad).is_err());
}

// ---------------------------------------------------------------------------
// Finite-difference gradient suite

#[test]
fn grad_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_tensor(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
    let k = rand_tensor(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
    let w = weights_for(&[1, 3, 5, 5], &mut rng);
    let err = fd_max_rel_err(&[x, k], |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], 1, 1).unwrap();
        tape.sum_weighted(y, w.clone()).unwrap()
    });
    assert!(err < 1e-4, "conv2d grad err {err}");
}

#[test]
fn grad_conv2d_strided() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = rand_tensor(&[2, 1, 6, 6], -1.0, 1.0, &mut rng);
    let k = rand_tensor(&[2, 1, 4, 4], -1.0, 1.0, &mut rng);
    let w = weights_for(&[2, 2, 3, 3], &mut rng);
    let err = fd_max_rel_err(&[x, k], |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], 2, 1).unwrap();
        tape.sum_weighted(y, w.clone()).unwrap()
    });
    assert!(err < 1e-4, "strided conv2d grad err {err}");
}

#[test]
fn grad_conv_transpose2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = rand_tensor(&[1, 3, 3, 3], -1.0, 1.0, &mut rng);
    let k = rand_tensor(&[3, 2, 4, 4], -1.0, 1.0, &mut rng);
    let w = weights_for(&[1, 2, 6, 6], &mut rng);
    let err = fd_max_rel_err(&[x, k], |tape, ids| {
        let y = tape.conv_transpose2d(ids[0], ids[1], 2, 1).unwrap();
        tape.sum_weighted(y, w.clone()).unwrap()
    });
    assert!(err < 1e-4, "conv_transpose2d grad err {err}");
}

#[test]
fn grad_batchnorm_train_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let x = rand_tensor(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
    let gamma = rand_tensor(&[3], 0.5, 1.5, &mut rng);
    let beta = rand_tensor(&[3], -0.5, 0.5, &mut rng);
    let w = weights_for(&[2, 3, 2, 2], &mut rng);
    let err = fd_max_rel_err(&[x, gamma, beta], |tape, ids| {
        let (y, _) = tape.batchnorm2d_train(ids[0], ids[1], ids[2]).unwrap();
        tape.sum_weighted(y, w.clone()).unwrap()
    });
    assert!(err < 1e-4, "batchnorm train grad err {err}");
}

#[test]
fn grad_batchnorm_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let x = rand_tensor(&[2, 2, 2, 2], -1.0, 1.0, &mut rng);
    let gamma = rand_tensor(&[2], 0.5, 1.5, &mut rng);
    let beta = rand_tensor(&[2], -0.5, 0.5, &mut rng);
    let mut running = RunningStats::new(2);
    running.mean = vec![0.3, -0.2];
    running.var = vec![1.5, 0.8];
    let w = weights_for(&[2, 2, 2, 2], &mut rng);
    let err = fd_max_rel_err(&[x, gamma, beta], |tape, ids| {
        let y = tape
            .batchnorm2d_eval(ids[0], ids[1], ids[2], &running)
            .unwrap();
        tape.sum_weighted(y, w.clone()).unwrap()
    });
    assert!(err < 1e-4, "batchnorm eval grad err {err}");
}

#[test]
fn grad_pointwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    // Keep values away from the relu/leaky kink at zero.
    let raw: Vec<f64> = (0..24)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::from_vec(&[24], raw);
    let w = weights_for(&[24], &mut rng);

    for op in ["relu", "leaky", "sigmoid"] {
        let wc = w.clone();
        let err = fd_max_rel_err(&[x.clone()], |tape, ids| {
            let y = match op {
                "relu" => tape.relu(ids[0]),
                "leaky" => tape.leaky_relu(ids[0], 0.2),
                _ => tape.sigmoid(ids[0]),
            };
            tape.sum_weighted(y, wc.clone()).unwrap()
        });
        assert!(err < 1e-4, "{op} grad err {err}");
    }
}

#[test]
fn grad_maxpool() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let x = rand_tensor(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
    let w = weights_for(&[1, 2, 2, 2], &mut rng);
    let err = fd_max_rel_err(&[x], |tape, ids| {
        let y = tape.maxpool2d(ids[0], 2, 2).unwrap();
        tape.sum_weighted(y, w.clone()).unwrap()
    });
    assert!(err < 1e-4, "maxpool grad err {err}");
}

#[test]
fn grad_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let pred = rand_tensor(&[12], 0.05, 0.95, &mut rng);
    let target = rand_tensor(&[12], 0.0, 1.0, &mut rng);
    let err = fd_max_rel_err(&[pred], |tape, ids| {
        tape.bce_loss(ids[0], target.clone()).unwrap()
    });
    assert!(err < 1e-4, "bce grad err {err}");
}

#[test]
fn grad_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(39);

    let a = rand_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    let b = rand_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    let w = weights_for(&[2, 2, 3, 3], &mut rng);
    let wc = w.clone();
    let err = fd_max_rel_err(&[a.clone(), b.clone()], |tape, ids| {
        let y = tape.add(ids[0], ids[1]).unwrap();
        tape.sum_weighted(y, wc.clone()).unwrap()
    });
    assert!(err < 1e-4, "add grad err {err}");

    let wc = w.clone();
    let err = fd_max_rel_err(&[a.clone(), b.clone()], |tape, ids| {
        let y = tape.mul(ids[0], ids[1]).unwrap();
        tape.sum_weighted(y, wc.clone()).unwrap()
    });
    assert!(err < 1e-4, "mul grad err {err}");

    let w4 = weights_for(&[2, 4, 3, 3], &mut rng);
    let err = fd_max_rel_err(&[a.clone(), b.clone()], |tape, ids| {
        let y = tape.concat_channels(ids[0], ids[1]).unwrap();
        tape.sum_weighted(y, w4.clone()).unwrap()
    });
    assert!(err < 1e-4, "concat grad err {err}");

    let wc = w.clone();
    let err = fd_max_rel_err(&[a.clone()], |tape, ids| {
        let y = tape.scale(ids[0], -1.7);
        tape.sum_weighted(y, wc.clone()).unwrap()
    });
    assert!(err < 1e-4, "scale grad err {err}");

    let wp = weights_for(&[2, 2, 4, 5], &mut rng);
    let err = fd_max_rel_err(&[a.clone()], |tape, ids| {
        let y = tape.pad_hw(ids[0], 4, 5).unwrap();
        tape.sum_weighted(y, wp.clone()).unwrap()
    });
    assert!(err < 1e-4, "pad grad err {err}");

    let wcrop = weights_for(&[2, 2, 2, 2], &mut rng);
    let err = fd_max_rel_err(&[a], |tape, ids| {
        let y = tape.crop_hw(ids[0], 2, 2).unwrap();
        tape.sum_weighted(y, wcrop.clone()).unwrap()
    });
    assert!(err < 1e-4, "crop grad err {err}");
}

#[test]
fn grad_embedding_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);

    let table = rand_tensor(&[5, 4], -1.0, 1.0, &mut rng);
    let rows = vec![3usize, 0, 3];
    let w = weights_for(&[3, 4], &mut rng);
    let err = fd_max_rel_err(&[table], |tape, ids| {
        let y = tape.row_select(ids[0], &rows).unwrap();
        tape.sum_weighted(y, w.clone()).unwrap()
    });
    assert!(err < 1e-4, "row_select grad err {err}");

    let x = rand_tensor(&[3, 8], -1.0, 1.0, &mut rng);
    let wmat = rand_tensor(&[4, 8], -1.0, 1.0, &mut rng);
    let wl = weights_for(&[3, 4], &mut rng);
    let err = fd_max_rel_err(&[x, wmat], |tape, ids| {
        let y = tape.linear(ids[0], ids[1]).unwrap();
        tape.sum_weighted(y, wl.clone()).unwrap()
    });
    assert!(err < 1e-4, "linear grad err {err}");

    let f = rand_tensor(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);
    let e = rand_tensor(&[2, 2, 4], -1.0, 1.0, &mut rng);
    let wcon = weights_for(&[2, 2, 3, 3], &mut rng);
    let err = fd_max_rel_err(&[f, e], |tape, ids| {
        let y = tape.contract_channels(ids[0], ids[1]).unwrap();
        tape.sum_weighted(y, wcon.clone()).unwrap()
    });
    assert!(err < 1e-4, "contract grad err {err}");
}

#[test]
fn grad_composite_chain() {
    // conv -> bn -> leaky -> convT -> sigmoid -> bce against a target:
    // exercises gradient flow through a realistic stack.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = rand_tensor(&[2, 1, 4, 4], -1.0, 1.0, &mut rng);
    let k1 = rand_tensor(&[2, 1, 4, 4], -0.5, 0.5, &mut rng);
    let gamma = rand_tensor(&[2], 0.8, 1.2, &mut rng);
    let beta = rand_tensor(&[2], -0.2, 0.2, &mut rng);
    let k2 = rand_tensor(&[2, 1, 4, 4], -0.5, 0.5, &mut rng);
    let target = rand_tensor(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
    let err = fd_max_rel_err(&[x, k1, gamma, beta, k2], |tape, ids| {
        let c = tape.conv2d(ids[0], ids[1], 2, 1).unwrap();
        let (b, _) = tape.batchnorm2d_train(c, ids[2], ids[3]).unwrap();
        let l = tape.leaky_relu(b, 0.2);
        let u = tape.conv_transpose2d(l, ids[4], 2, 1).unwrap();
        let s = tape.sigmoid(u);
        tape.bce_loss(s, target.clone()).unwrap()
    });
    assert!(err < 1e-4, "composite chain grad err {err}");
}
