mod common;

use common::{grad_check, random, rng};
use rand::Rng;
use vlchat::{Error, Graph, Tensor};

const OP_TOL: f64 = 1e-4;
const SHAPES: usize = 10;

fn t32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

#[test]
fn matmul_hand_cases() {
    let mut g = Graph::<f32>::new();
    let i = g.constant(Tensor::eye(2));
    let out = g.matmul(i, i).unwrap();
    assert_eq!(g.value(out).data(), Tensor::<f32>::eye(2).data());

    let a = g.constant(t32(&[2, 2], &[1., 2., 3., 4.]));
    let b = g.constant(t32(&[2, 1], &[1., 1.]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);

    match g.matmul(a, c).and_then(|_| g.matmul(c, a)) {
        Err(Error::Shape(msg)) => {
            assert!(msg.contains("[2, 1]") && msg.contains("[2, 2]"), "{msg}")
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_5x7_by_7x3() {
    let mut r = rng(1);
    let inputs = [random(&[5, 7], &mut r), random(&[7, 3], &mut r)];
    let err = grad_check(&inputs, |g, v| g.matmul(v[0], v[1]).unwrap());
    assert!(err < OP_TOL, "rel err {err}");
}

#[test]
fn softmax_values() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[3], &[0., 0., 0.]));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let x = g.constant(t32(&[2], &[1000., 0.]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);

    let mut r = rng(2);
    let x = random(&[4, 6], &mut r).cast::<f32>();
    let x = g.constant(x);
    for axis in 0..2 {
        let y = g.softmax(x, axis).unwrap();
        let v = g.value(y);
        let (rows, cols) = (4, 6);
        let sums: Vec<f32> = if axis == 1 {
            (0..rows).map(|i| (0..cols).map(|j| v.at(&[i, j])).sum()).collect()
        } else {
            (0..cols).map(|j| (0..rows).map(|i| v.at(&[i, j])).sum()).collect()
        };
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6), "{sums:?}");
    }
    assert!(matches!(g.softmax(x, 2), Err(Error::OutOfBounds(_))));
}

#[test]
fn layer_norm_of_constant_vector_is_bias() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[1, 4], &[3., 3., 3., 3.]));
    let gain = g.constant(t32(&[4], &[2., 2., 2., 2.]));
    let bias = g.constant(t32(&[4], &[0.5, -1., 0., 1.]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.0, 0.0, 1.0]);
}

#[test]
fn gelu_fixed_points() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![3], &[0.0, 1.0, -1.0]).unwrap());
    let y = g.gelu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    // tanh form: 0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let expect = 0.5 * (1.0 + (c * 1.044715f64).tanh());
    assert!((v[1] - expect).abs() < 1e-15);
    assert!((v[2] + 1.0 - expect).abs() < 1e-15);
}

#[test]
fn bounds_are_checked() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[3, 4]));
    assert!(matches!(g.slice(x, &[0..4, 0..1]), Err(Error::OutOfBounds(_))));
    assert!(matches!(g.slice(x, &[0..1]), Err(Error::OutOfBounds(_))));
    assert!(matches!(g.concat(&[x], 2), Err(Error::OutOfBounds(_))));
    assert!(matches!(g.embed(x, &[3]), Err(Error::OutOfBounds(_))));
    let y = g.constant(Tensor::zeros(&[2, 5]));
    assert!(matches!(g.concat(&[x, y], 0), Err(Error::Shape(_))));
}

#[test]
fn masked_cross_entropy_cases() {
    let v = 11usize;
    let mut g = Graph::<f64>::new();
    // uniform logits → ln V per masked row
    let logits = g.constant(Tensor::zeros(&[3, v]));
    let loss = g
        .masked_cross_entropy(logits, &[1, 2, 3], &[true, false, true])
        .unwrap();
    assert!((g.value(loss).item() - (v as f64).ln()).abs() < 1e-12);

    // confident correct logits → loss near zero
    let mut data = vec![0.0; 2 * v];
    data[4] = 60.0;
    data[v + 7] = 60.0;
    let logits = g.constant(Tensor::new(vec![2, v], data).unwrap());
    let loss = g.masked_cross_entropy(logits, &[4, 7], &[true, true]).unwrap();
    assert!(g.value(loss).item() < 1e-20);

    // empty mask is an explicit error, not a zero
    assert!(matches!(
        g.masked_cross_entropy(logits, &[4, 7], &[false, false]),
        Err(Error::EmptyLoss)
    ));
}

#[test]
fn flipping_unmasked_targets_is_bit_identical() {
    let mut r = rng(3);
    let logits = random(&[6, 9], &mut r).cast::<f32>();
    let mask = [false, true, false, true, true, false];
    let base_targets = [0usize, 3, 5, 8, 1, 2];
    let eval = |targets: &[usize]| {
        let mut g = Graph::<f32>::new();
        let l = g.param(&logits);
        let loss = g.masked_cross_entropy(l, targets, &mask).unwrap();
        g.backward(loss).unwrap();
        (g.value(loss).item(), g.grad(l).unwrap().to_vec())
    };
    let (base, base_grad) = eval(&base_targets);
    for pos in [0, 2, 5] {
        for alt in 0..9 {
            let mut t = base_targets;
            t[pos] = alt;
            let (loss, grad) = eval(&t);
            assert_eq!(loss.to_bits(), base.to_bits());
            assert!(grad.iter().zip(&base_grad).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
    // unmasked rows receive exactly zero gradient
    for row in [0, 2, 5] {
        assert!(base_grad[row * 9..(row + 1) * 9].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn three_op_chain_matches_hand_derivation() {
    // s = Σ (3x)² → ds/dx = 18x
    let x = Tensor::<f64>::from_f64(vec![4], &[0.5, -1.25, 2.0, 0.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let xv = g.param(&x);
    let y = g.scale(xv, 3.0);
    let z = g.mul(y, y).unwrap();
    let s = g.sum(z);
    g.backward(s).unwrap();
    let expect: Vec<f64> = x.data().iter().map(|v| 18.0 * v).collect();
    assert_eq!(g.grad(xv).unwrap(), expect.as_slice());
    assert_eq!(g.value(s).item(), 9.0 * (0.25 + 1.5625 + 4.0));
}

#[test]
fn identical_inputs_give_bit_identical_outputs_and_gradients() {
    let run = || {
        let mut r = rng(9);
        let a = random(&[5, 8], &mut r).cast::<f32>();
        let b = random(&[8, 4], &mut r).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let (av, bv) = (g.param(&a), g.param(&b));
        let c = g.matmul(av, bv).unwrap();
        let c = g.gelu(c);
        let p = g.softmax(c, 1).unwrap();
        let s = g.sum(p);
        let loss = g.masked_cross_entropy(c, &[0, 1, 2, 3, 0], &[true; 5]).unwrap();
        let total = g.add(loss, s).unwrap();
        g.backward(total).unwrap();
        (g.value(total).clone(), g.grad(av).unwrap().to_vec(), g.grad(bv).unwrap().to_vec())
    };
    let (l1, ga1, gb1) = run();
    let (l2, ga2, gb2) = run();
    assert!(l1.bit_eq(&l2));
    assert_eq!(
        ga1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        ga2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        gb1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        gb2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn interior_gradients_are_released_leaf_gradients_kept() {
    let mut g = Graph::<f64>::new();
    let x = g.param(&Tensor::ones(&[3]));
    let y = g.scale(x, 2.0);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(y).is_none());
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    let c = g.constant(Tensor::ones(&[3]));
    let s2 = g.sum(c);
    g.backward(s2).unwrap();
    assert!(g.grad(c).is_none());
}

// Finite-difference sweeps: every differentiable op on SHAPES random shapes.

fn dims(r: &mut impl Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

#[test]
fn fd_matmul_and_transpose() {
    let mut r = rng(10);
    for _ in 0..SHAPES {
        let (m, k, n) = (dims(&mut r, 1, 6), dims(&mut r, 1, 6), dims(&mut r, 1, 6));
        let inputs = [random(&[m, k], &mut r), random(&[k, n], &mut r)];
        let err = grad_check(&inputs, |g, v| g.matmul(v[0], v[1]).unwrap());
        assert!(err < OP_TOL, "matmul {m}x{k}x{n}: {err}");
        let err = grad_check(&inputs[..1], |g, v| g.transpose(v[0]).unwrap());
        assert!(err < OP_TOL, "transpose: {err}");
    }
}

#[test]
fn fd_elementwise() {
    let mut r = rng(11);
    for _ in 0..SHAPES {
        let (m, n) = (dims(&mut r, 1, 5), dims(&mut r, 1, 6));
        let inputs = [random(&[m, n], &mut r), random(&[m, n], &mut r), random(&[n], &mut r)];
        let err = grad_check(&inputs[..2], |g, v| g.add(v[0], v[1]).unwrap());
        assert!(err < OP_TOL, "add {err}");
        let err = grad_check(&inputs[..2], |g, v| g.mul(v[0], v[1]).unwrap());
        assert!(err < OP_TOL, "mul {err}");
        let err = grad_check(&[inputs[0].clone(), inputs[2].clone()], |g, v| {
            g.add_row(v[0], v[1]).unwrap()
        });
        assert!(err < OP_TOL, "add_row {err}");
        let err = grad_check(&inputs[..1], |g, v| g.scale(v[0], -1.7));
        assert!(err < OP_TOL, "scale {err}");
        let err = grad_check(&inputs[..1], |g, v| g.gelu(v[0]));
        assert!(err < OP_TOL, "gelu {err}");
        let err = grad_check(&inputs[..1], |g, v| g.sum(v[0]));
        assert!(err < OP_TOL, "sum {err}");
    }
}

#[test]
fn fd_softmax_any_axis() {
    let mut r = rng(12);
    let err = grad_check(&[random(&[4, 6], &mut r)], |g, v| g.softmax(v[0], 1).unwrap());
    assert!(err < OP_TOL, "softmax 4x6: {err}");
    for _ in 0..SHAPES {
        let rank = dims(&mut r, 1, 3);
        let shape: Vec<usize> = (0..rank).map(|_| dims(&mut r, 1, 4)).collect();
        let axis = r.gen_range(0..rank);
        let x = random(&shape, &mut r);
        let err = grad_check(&[x], |g, v| g.softmax(v[0], axis).unwrap());
        assert!(err < OP_TOL, "softmax {shape:?} axis {axis}: {err}");
    }
}

#[test]
fn fd_causal_softmax() {
    let mut r = rng(13);
    for _ in 0..SHAPES {
        let (tq, extra) = (dims(&mut r, 1, 5), dims(&mut r, 0, 3));
        let offset = extra;
        let x = random(&[tq, tq + extra], &mut r);
        let err = grad_check(&[x], |g, v| g.causal_softmax(v[0], offset).unwrap());
        assert!(err < OP_TOL, "causal softmax {tq}x{}: {err}", tq + extra);
    }
}

#[test]
fn fd_layer_norm() {
    let mut r = rng(14);
    for _ in 0..SHAPES {
        let (m, n) = (dims(&mut r, 1, 4), dims(&mut r, 2, 7));
        let inputs = [random(&[m, n], &mut r), random(&[n], &mut r), random(&[n], &mut r)];
        let err = grad_check(&inputs, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
        assert!(err < OP_TOL, "layer_norm {m}x{n}: {err}");
    }
}

#[test]
fn fd_embed_concat_slice() {
    let mut r = rng(15);
    for _ in 0..SHAPES {
        let (vocab, d) = (dims(&mut r, 2, 6), dims(&mut r, 1, 4));
        let ids: Vec<usize> = (0..dims(&mut r, 1, 7)).map(|_| r.gen_range(0..vocab)).collect();
        let err = grad_check(&[random(&[vocab, d], &mut r)], |g, v| g.embed(v[0], &ids).unwrap());
        assert!(err < OP_TOL, "embed: {err}");

        let axis = r.gen_range(0..2);
        let base = [dims(&mut r, 1, 3), dims(&mut r, 1, 3)];
        let parts: Vec<Tensor<f64>> = (0..dims(&mut r, 2, 3))
            .map(|_| {
                let mut s = base;
                s[axis] = dims(&mut r, 1, 3);
                random(&s, &mut r)
            })
            .collect();
        let err = grad_check(&parts, |g, v| g.concat(v, axis).unwrap());
        assert!(err < OP_TOL, "concat: {err}");

        let shape = [dims(&mut r, 1, 4), dims(&mut r, 1, 4), dims(&mut r, 1, 4)];
        let ranges: Vec<_> = shape
            .iter()
            .map(|&e| {
                let a = r.gen_range(0..e);
                a..r.gen_range(a + 1..=e)
            })
            .collect();
        let err = grad_check(&[random(&shape, &mut r)], |g, v| g.slice(v[0], &ranges).unwrap());
        assert!(err < OP_TOL, "slice: {err}");
    }
}

#[test]
fn fd_rope() {
    let mut r = rng(16);
    for _ in 0..SHAPES {
        let heads = dims(&mut r, 1, 3);
        let hd = 2 * dims(&mut r, 1, 3);
        let t = dims(&mut r, 1, 5);
        let offset = dims(&mut r, 0, 9);
        let err = grad_check(&[random(&[t, heads * hd], &mut r)], |g, v| {
            g.rope(v[0], heads, offset, 10_000.0).unwrap()
        });
        assert!(err < OP_TOL, "rope: {err}");
    }
}

#[test]
fn rope_at_position_zero_is_identity() {
    let mut r = rng(17);
    let x = random(&[1, 8], &mut r);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let y = g.rope(xv, 2, 0, 10_000.0).unwrap();
    assert!(g.value(y).bit_eq(&x));
}

#[test]
fn fd_masked_cross_entropy() {
    let mut r = rng(18);
    for _ in 0..SHAPES {
        let (t, v) = (dims(&mut r, 1, 5), dims(&mut r, 2, 7));
        let targets: Vec<usize> = (0..t).map(|_| r.gen_range(0..v)).collect();
        let mut mask: Vec<bool> = (0..t).map(|_| r.gen_bool(0.6)).collect();
        mask[r.gen_range(0..t)] = true;
        let err = grad_check(&[random(&[t, v], &mut r)], |g, x| {
            g.masked_cross_entropy(x[0], &targets, &mask).unwrap()
        });
        assert!(err < OP_TOL, "cross entropy: {err}");
    }
}
