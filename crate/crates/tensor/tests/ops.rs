use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sslab_tensor::{Checkpoint, EmaState, Graph, Params, Tensor, TensorError};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([4])).unwrap();
    let y = g.softmax(x, 0, 1.0).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);
}

#[test]
fn l2_normalize_three_four_five() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
    let y = g.l2_normalize(x, 0, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
}

#[test]
fn softmax_rows_sum_to_one_and_match_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn([16, 10], |_| rng.random_range(-20.0..20.0));
    let mut g = Graph::<f64>::new();
    let v = g.constant(x).unwrap();
    let p = g.softmax(v, 1, 0.7).unwrap();
    let lp = g.log_softmax(v, 1, 0.7).unwrap();
    for r in 0..16 {
        let row = g.value(p).row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in row.iter().zip(g.value(lp).row(r)) {
            assert!((a.ln() - b).abs() < 1e-9);
        }
    }
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (y * stride + ki) as isize - pad as isize;
                                let ix = (xx * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                    continue;
                                }
                                acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oi * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, oh, ow], out).unwrap()
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (stride, pad, k) in [(1, 0, 3), (2, 1, 3), (1, 2, 5), (3, 1, 2)] {
        let x = Tensor::from_fn([3, 2, 9, 8], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn([4, 2, k, k], |_| rng.random_range(-1.0..1.0));
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()).unwrap(),
            g.constant(w.clone()).unwrap(),
            g.constant(Tensor::new([4], b.clone()).unwrap()).unwrap(),
        );
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let reference = naive_conv(&x, &w, &b, stride, pad);
        assert_eq!(g.value(y).shape(), reference.shape());
        assert!(g.value(y).max_abs_diff(&reference).unwrap() < 1e-10);
    }
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3])).unwrap();
    let b = g.constant(Tensor::zeros([2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    let c = g.constant(Tensor::zeros([2])).unwrap();
    assert!(g.add(a, c).is_err());
    assert!(g.softmax(a, 0, 0.0).is_err());
    assert!(g.l2_normalize(a, 1, 0.0).is_err());
    assert!(matches!(g.backward(a), Err(TensorError::NotScalar(_))));
}

#[test]
fn checked_mode_rejects_non_finite() {
    let mut g = Graph::<f64>::checked();
    assert!(matches!(g.constant(t(&[2], &[1.0, f64::NAN])), Err(TensorError::NonFinite { .. })));
    let x = g.constant(t(&[1], &[1e300])).unwrap();
    let y = g.mul(x, x);
    assert!(matches!(y, Err(TensorError::NonFinite { .. })));
    // unchecked graphs pass values through
    let mut g = Graph::<f64>::new();
    assert!(g.constant(t(&[1], &[f64::INFINITY])).is_ok());
}

#[test]
fn f32_graph_backward() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new([2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let y = g.matmul(x, x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    // d/dX sum(X·X) = 1·Xᵀ + Xᵀ·1
    assert_eq!(g.grad(x).unwrap().data(), &[7.0, 11.0, 9.0, 13.0]);
}

#[test]
fn ema_contraction_matches_power_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut student = Params::new();
    let mut teacher = Params::new();
    student.insert("a", Tensor::from_fn([5, 3], |_| rng.random_range(-1.0..1.0)));
    teacher.insert("a", Tensor::from_fn([5, 3], |_| rng.random_range(-1.0..1.0)));
    let m: f64 = 0.9;
    let d0 = teacher.get("a").unwrap().zip_map(student.get("a").unwrap(), |x, y| x - y).unwrap().norm();
    let mut ema = EmaState::new(teacher, m);
    for k in 1..=50 {
        ema.update(&student).unwrap();
        let d = ema.params.get("a").unwrap().zip_map(student.get("a").unwrap(), |x, y| x - y).unwrap().norm();
        assert!((d - d0 * m.powi(k)).abs() < 1e-12, "k={k}");
    }
}

#[test]
fn checkpoint_rejects_dtype_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let mut p = Params::new();
    p.insert("w", t(&[2], &[1.0, 2.0]));
    Checkpoint::new(p).save(&path).unwrap();
    assert!(Checkpoint::<f32>::load(&path).is_err());
    let blob = sslab_tensor::checkpoint::blob_path(&path);
    std::fs::write(&blob, [0u8; 9]).unwrap();
    assert!(Checkpoint::<f64>::load(&path).is_err());
}

proptest! {
    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        values in prop::collection::vec(any::<f64>(), 1..40),
        small in prop::collection::vec(any::<f32>(), 0..8),
        step in any::<u32>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Params::new();
        let n = values.len();
        p.insert("layer.w", Tensor::new([n], values).unwrap());
        p.insert("empty", Tensor::zeros([0, 3]));
        let mut ck = Checkpoint::new(p);
        ck.meta.insert("step".into(), step.into());
        let path = dir.path().join("run/ckpt.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        prop_assert_eq!(back.meta, ck.meta);
        let (a, b) = (back.tensors.get("layer.w").unwrap(), ck.tensors.get("layer.w").unwrap());
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(back.tensors.get("empty").unwrap().shape(), &[0, 3]);

        let mut q = Params::new();
        let m = small.len();
        q.insert("h", Tensor::new([m], small).unwrap());
        let path32 = dir.path().join("c32.json");
        Checkpoint::new(q.clone()).save(&path32).unwrap();
        let back32 = Checkpoint::<f32>::load(&path32).unwrap();
        let (a, b) = (back32.tensors.get("h").unwrap(), q.get("h").unwrap());
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
