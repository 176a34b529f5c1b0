use moe_peft::gradcheck::{finite_diff_check, DEFAULT_EPS};
use moe_peft::tape::{Elementwise, Tape, Var};
use moe_peft::{Result, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn triple_loop(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Weighted sum against fixed random weights so every output coordinate
/// carries a distinct, generic gradient.
fn probe_sum(t: &mut Tape<f32>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(t.shape(y), -1.0, 1.0, &mut rng(seed));
    let wv = t.constant(w);
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

#[test]
fn matmul_identity_and_scalar() {
    let mut t = Tape::<f32>::new();
    let eye = t.constant(Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let m = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng(1));
    let mv = t.constant(m.clone());
    let out = t.matmul(eye, mv).unwrap();
    assert_eq!(t.value(out).data(), m.data());

    let a = t.constant(Tensor::scalar(2.0).reshape(&[1, 1]).unwrap());
    let b = t.constant(Tensor::scalar(3.0).reshape(&[1, 1]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng(2));
    let b = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng(3));
    let mut t = Tape::<f32>::new();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(av, bv).unwrap();
    let oracle = triple_loop(&a, &b);
    for (x, y) in t.value(c).data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 2]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(&[4]));
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.25; 4]);

    let x = t.constant(Tensor::from_f64(&[2], &[2f64.ln(), 0.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    let d = t.value(y).data();
    assert!((d[0] - 2.0 / 3.0).abs() < 1e-6 && (d[1] - 1.0 / 3.0).abs() < 1e-6);

    let nan = t.constant(Tensor::from_f64(&[2], &[f64::NAN, 0.0]).unwrap());
    assert!(t.softmax(nan, 0).is_err());
    assert!(t.softmax(x, 1).is_err());
}

#[test]
fn softmax_over_middle_axis() {
    let raw = Tensor::<f32>::uniform(&[2, 3, 4], -2.0, 2.0, &mut rng(4));
    let mut t = Tape::<f32>::new();
    let x = t.constant(raw.clone());
    let y = t.softmax(x, 1).unwrap();
    let out = t.value(y).data();
    for o in 0..2 {
        for i in 0..4 {
            let col: Vec<f64> = (0..3).map(|j| raw.data()[o * 12 + j * 4 + i] as f64).collect();
            let z: f64 = col.iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                let want = col[j].exp() / z;
                assert!((out[o * 12 + j * 4 + i] as f64 - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::<f32>::new();
    let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng(5));
    let xv = t.constant(x.clone());
    let ones = t.constant(Tensor::ones(&[2, 3]));
    let y = t.elementwise(Elementwise::Mul, xv, Some(ones)).unwrap();
    assert_eq!(t.value(y).data(), x.data());

    let r = t.constant(Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap());
    let y = t.elementwise(Elementwise::Relu, r, None).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 2.0]);

    // tile-then-multiply oracle for trailing broadcast
    let v = Tensor::uniform(&[3], -1.0, 1.0, &mut rng(6));
    let vv = t.constant(v.clone());
    let y = t.mul(xv, vv).unwrap();
    let tiled: Vec<f32> = (0..6).map(|i| x.data()[i] * v.data()[i % 3]).collect();
    assert_eq!(t.value(y).data(), tiled.as_slice());

    let bad = t.constant(Tensor::ones(&[2]));
    assert!(t.mul(xv, bad).is_err());
    assert!(t.elementwise(Elementwise::Add, xv, None).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::<f32>::new();
    let v = 7;
    let logits = t.constant(Tensor::zeros(&[1, 2, v]));
    let ce = t.cross_entropy(logits, &[3, 5], &[1.0, 1.0]).unwrap();
    assert!((t.value(ce).item() - (v as f32).ln()).abs() < 1e-6);

    let mut sharp = vec![0.0f64; 2 * v];
    sharp[3] = 60.0;
    sharp[v + 5] = 60.0;
    let logits = t.constant(Tensor::from_f64(&[1, 2, v], &sharp).unwrap());
    let ce = t.cross_entropy(logits, &[3, 5], &[1.0, 1.0]).unwrap();
    assert!(t.value(ce).item() < 1e-6);

    assert!(t.cross_entropy(logits, &[3, v], &[1.0, 1.0]).is_err());
}

#[test]
fn cross_entropy_matches_log_softmax_oracle() {
    let raw = Tensor::<f32>::uniform(&[2, 3, 5], -2.0, 2.0, &mut rng(7));
    let targets = [0, 4, 2, 1, 3, 3];
    let mask = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0];
    let mut t = Tape::<f32>::new();
    let lv = t.constant(raw.clone());
    let ce = t.cross_entropy(lv, &targets, &mask).unwrap();
    let mut total = 0.0f64;
    let mut count = 0.0;
    for r in 0..6 {
        if mask[r] == 0.0 {
            continue;
        }
        let row: Vec<f64> = raw.data()[r * 5..(r + 1) * 5].iter().map(|&v| v as f64).collect();
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        total += lse - row[targets[r]];
        count += 1.0;
    }
    assert!((t.value(ce).item() as f64 - total / count).abs() < 1e-6);
}

#[test]
fn backward_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::scalar(2.0));
    let y = t.constant(Tensor::scalar(3.0));
    let p = t.mul(x, y).unwrap();
    let s = t.sum(p);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[3.0]);
    assert!(t.grad(y).is_none());
    assert!(t.backward(s).is_err(), "second backward must be rejected");

    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::uniform(&[5], -1.0, 1.0, &mut rng(8)));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0; 5]);

    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::zeros(&[3]));
    assert!(t.backward(x).is_err(), "non-scalar loss");
}

#[test]
fn unreachable_and_frozen_tensors_get_no_grad() {
    let mut t = Tape::<f32>::new();
    let w = t.param(Tensor::ones(&[2, 2]));
    let frozen = t.constant(Tensor::ones(&[2, 2]));
    let unused = t.param(Tensor::ones(&[2]));
    let x = t.matmul(w, frozen).unwrap();
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert!(t.grad(w).is_some());
    assert!(t.grad(frozen).is_none());
    assert!(t.grad(unused).is_none());
}

fn check(seed: u64, shape: &[usize], f: impl FnMut(&mut Tape<f32>, Var) -> Result<Var>) -> f64 {
    let x = Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed));
    finite_diff_check(f, &x, 1e-2).unwrap()
}

#[test]
fn per_op_gradients_match_central_differences_in_f32() {
    let tol = 1e-3;
    let b = Tensor::<f32>::uniform(&[4, 3], -1.0, 1.0, &mut rng(100));
    let e = check(1, &[2, 4], |t, x| {
        let bv = t.constant(b.clone());
        let y = t.matmul(x, bv)?;
        probe_sum(t, y, 11)
    });
    assert!(e < tol, "matmul a {e}");

    let a = Tensor::<f32>::uniform(&[3, 2], -1.0, 1.0, &mut rng(101));
    let e = check(2, &[2, 4], |t, x| {
        let av = t.constant(a.clone());
        let y = t.matmul(av, x)?;
        probe_sum(t, y, 12)
    });
    assert!(e < tol, "matmul b {e}");

    let other = Tensor::<f32>::uniform(&[2, 4, 3], -1.0, 1.0, &mut rng(102));
    let e = check(3, &[2, 3, 4], |t, x| {
        let o = t.constant(other.clone());
        let y = t.bmm(x, o)?;
        probe_sum(t, y, 13)
    });
    assert!(e < tol, "bmm {e}");

    let e = check(4, &[3, 4], |t, x| {
        let y = t.softmax(x, 1)?;
        probe_sum(t, y, 14)
    });
    assert!(e < tol, "softmax {e}");

    let e = check(5, &[3, 4], |t, x| {
        let y = t.gelu(x);
        probe_sum(t, y, 15)
    });
    assert!(e < tol, "gelu {e}");

    // keep relu inputs away from the kink
    let relu_x = Tensor::<f32>::uniform(&[6], -1.0, 1.0, &mut rng(6)).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let e = finite_diff_check(
        |t, x| {
            let y = t.relu(x);
            probe_sum(t, y, 16)
        },
        &relu_x,
        1e-2,
    )
    .unwrap();
    assert!(e < tol, "relu {e}");

    let bias = Tensor::<f32>::uniform(&[4], -1.0, 1.0, &mut rng(103));
    let e = check(7, &[3, 4], |t, x| {
        let bv = t.param(bias.clone());
        let y = t.mul(x, bv)?;
        let z = t.add(y, bv)?;
        probe_sum(t, z, 17)
    });
    assert!(e < tol, "broadcast add/mul {e}");

    let e = check(8, &[4], |t, w| {
        let big = t.constant(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng(104)));
        let y = t.mul(big, w)?;
        probe_sum(t, y, 18)
    });
    assert!(e < tol, "broadcast operand grad {e}");

    let e = check(9, &[2, 3, 4], |t, x| {
        let y = t.permute(x, &[2, 0, 1])?;
        let y = t.reshape(y, &[8, 3])?;
        probe_sum(t, y, 19)
    });
    assert!(e < tol, "permute {e}");

    let e = check(10, &[3, 2], |t, x| {
        let y = t.gather(x, &[2, 0, 2, 1])?;
        probe_sum(t, y, 20)
    });
    assert!(e < tol, "gather {e}");

    let w = Tensor::<f32>::uniform(&[4], 0.5, 1.5, &mut rng(105));
    let e = check(11, &[3, 4], |t, x| {
        let wv = t.param(w.clone());
        let y = t.rms_norm(x, wv, 1e-6)?;
        probe_sum(t, y, 21)
    });
    assert!(e < tol, "rms_norm {e}");

    let e = check(12, &[2, 2, 5], |t, x| t.cross_entropy(x, &[1, 4, 0, 2], &[1.0, 1.0, 0.0, 1.0]));
    assert!(e < tol, "cross_entropy {e}");

    let e = check(13, &[5, 3], |t, x| {
        let y = t.mean_rows(x)?;
        probe_sum(t, y, 22)
    });
    assert!(e < tol, "mean_rows {e}");
}

#[test]
fn soft_merge_and_topk_gradients() {
    let tol = 1e-3;
    let bank = Tensor::<f32>::uniform(&[3, 4], 0.0, 2.0, &mut rng(200));
    let e = check(1, &[5, 3], |t, logits| {
        let p = t.softmax(logits, 1)?;
        let b = t.param(bank.clone());
        let m = t.soft_merge(p, b)?;
        probe_sum(t, m, 30)
    });
    assert!(e < tol, "soft_merge wrt probs {e}");

    let e = check(2, &[3, 4], |t, b| {
        let p = t.constant(Tensor::uniform(&[5, 3], 0.1, 1.0, &mut rng(201)));
        let m = t.soft_merge(p, b)?;
        probe_sum(t, m, 31)
    });
    assert!(e < tol, "soft_merge wrt bank {e}");

    // the renormalized gate divides two nearby f32 sums, so this one is
    // checked in f64
    for renorm in [true, false] {
        let x = Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut rng(3));
        let w = Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut rng(32));
        let e = finite_diff_check(
            |t: &mut Tape<f64>, logits| {
                let p = t.softmax(logits, 1)?;
                let g = t.topk_gate(p, 2, renorm)?;
                let wv = t.constant(w.clone());
                let m = t.mul(g, wv)?;
                Ok(t.sum(m))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < tol, "topk renorm={renorm} {e}");
    }
}

#[test]
fn soft_merge_of_identical_rows_is_exact() {
    let mut t = Tape::<f32>::new();
    let logits = t.constant(Tensor::uniform(&[16, 7], -3.0, 3.0, &mut rng(9)));
    let p = t.softmax(logits, 1).unwrap();
    let ones = t.constant(Tensor::ones(&[7, 5]));
    let m = t.soft_merge(p, ones).unwrap();
    assert!(t.value(m).data().iter().all(|&v| v == 1.0));
}

proptest! {
    #[test]
    fn softmax_normalizes_and_is_shift_invariant(
        xs in proptest::collection::vec(-20.0f32..20.0, 1..12),
        c in -50.0f32..50.0,
    ) {
        let n = xs.len();
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(&[n], xs.clone()).unwrap());
        let y = t.softmax(x, 0).unwrap();
        let shifted = t.constant(Tensor::new(&[n], xs.iter().map(|v| v + c).collect()).unwrap());
        let ys = t.softmax(shifted, 0).unwrap();
        let p = t.value(y).data();
        let sum: f64 = p.iter().map(|&v| v as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        for (a, b) in p.iter().zip(t.value(ys).data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_functions_are_checked_exactly(ws in proptest::collection::vec(-4i32..4, 1..6)) {
        let n = ws.len();
        let w = Tensor::<f32>::new(&[n], ws.iter().map(|&v| v as f32).collect()).unwrap();
        let x = Tensor::<f32>::new(&[n], (0..n).map(|i| i as f32 - 1.0).collect()).unwrap();
        let e = finite_diff_check(|t, v| {
            let wv = t.constant(w.clone());
            let p = t.mul(v, wv)?;
            Ok(t.sum(p))
        }, &x, DEFAULT_EPS).unwrap();
        prop_assert!(e < 1e-5);
    }
}
