use posegraph_core::gradcheck::grad_check;
use posegraph_core::param::ParamStore;
use posegraph_core::{Error, Mode, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn run(f: impl FnOnce(&mut Tape) -> posegraph_core::Var) -> Tensor {
    let mut tape = Tape::inference();
    let v = f(&mut tape);
    tape.value(v).clone()
}

#[test]
fn conv_counts_overlaps() {
    let y = run(|tp| {
        let x = tp.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tp.constant(Tensor::ones(&[1, 1, 3, 3]));
        tp.conv2d(x, w, None, 1, 1).unwrap()
    });
    assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn unit_pointwise_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[2, 1, 4, 5], &mut rng);
    let y = run(|tp| {
        let xv = tp.constant(x.clone());
        let w = tp.constant(Tensor::ones(&[1, 1, 1, 1]));
        tp.conv2d(xv, w, None, 1, 0).unwrap()
    });
    assert_eq!(y, x);
}

#[test]
fn conv_rejects_mismatched_channels() {
    let mut tp = Tape::inference();
    let x = tp.constant(Tensor::ones(&[1, 2, 4, 4]));
    let w = tp.constant(Tensor::ones(&[1, 3, 3, 3]));
    let err = tp.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err:?}");
}

#[test]
fn relu_and_sigmoid_values() {
    let y = run(|tp| {
        let x = tp.constant(t(&[2], &[-2.0, 3.0]));
        tp.relu(x)
    });
    assert_eq!(y.data(), &[0.0, 3.0]);
    let y = run(|tp| {
        let x = tp.constant(t(&[5], &[0.0, -40.0, 40.0, -800.0, 800.0]));
        tp.sigmoid(x)
    });
    assert_eq!(y.data()[0], 0.5);
    assert!(y.data()[1..].iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1]).with_grad());
    let y = tape.sigmoid(x);
    let s = tape.sum(y);
    let g = tape.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.25]);
    let err = grad_check(
        |tp, v| {
            let y = tp.sigmoid(v);
            Ok(tp.sum(y))
        },
        &Tensor::zeros(&[1]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9);
}

#[test]
fn softmax_closed_forms() {
    let y = run(|tp| {
        let x = tp.constant(Tensor::ones(&[4]));
        tp.softmax(x, 0).unwrap()
    });
    assert_eq!(y.data(), &[0.25; 4]);
    let y = run(|tp| {
        let x = tp.constant(t(&[2], &[0.0, libm::log(3.0)]));
        tp.softmax(x, 0).unwrap()
    });
    assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut tp = Tape::inference();
    let x = tp.constant(Tensor::ones(&[2, 3]));
    assert!(tp.softmax(x, 2).is_err());
}

#[test]
fn global_pool_means() {
    let y = run(|tp| {
        let x = tp.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        tp.global_avg_pool(x).unwrap()
    });
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[2.5]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 2, 3, 3], 0.7).with_grad());
    let p = tape.global_avg_pool(x).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s, &mut ParamStore::new()).unwrap();
    assert!(g.get(x).unwrap().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-16));
}

#[test]
fn nearest_upsample_replicates() {
    let y = run(|tp| {
        let x = tp.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        tp.upsample_nearest(x, 2).unwrap()
    });
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    assert_eq!(
        y.data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
}

#[test]
fn bilinear_up_then_strided_mean_keeps_constant() {
    let y = run(|tp| {
        let x = tp.constant(Tensor::full(&[1, 1, 3, 3], 2.5));
        let up = tp.resize_bilinear(x, 6, 6).unwrap();
        let w = tp.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        tp.conv2d(up, w, None, 2, 0).unwrap()
    });
    assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn matmul_identity_and_concat_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::randn(&[2, 3], &mut rng);
    let y = run(|tp| {
        let i = tp.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let av = tp.constant(a.clone());
        tp.matmul(i, av).unwrap()
    });
    assert_eq!(y, a);
    let y = run(|tp| {
        let p = tp.constant(Tensor::ones(&[1, 3, 4, 4]));
        let q = tp.constant(Tensor::zeros(&[1, 5, 4, 4]));
        tp.concat_channels(&[p, q]).unwrap()
    });
    assert_eq!(y.shape(), &[1, 8, 4, 4]);
    let mut tp = Tape::inference();
    let a = tp.constant(Tensor::ones(&[2, 3]));
    let b = tp.constant(Tensor::ones(&[2, 3]));
    assert!(tp.matmul(a, b).is_err());
}

#[test]
fn channel_broadcast_scales_each_plane() {
    let att = t(&[1, 2, 1, 1], &[2.0, -1.0]);
    let y = run(|tp| {
        let a = tp.constant(att);
        let x = tp.constant(Tensor::ones(&[1, 2, 3, 3]));
        tp.mul(a, x).unwrap()
    });
    assert!(y.data()[..9].iter().all(|&v| v == 2.0));
    assert!(y.data()[9..].iter().all(|&v| v == -1.0));
    let mut tp = Tape::inference();
    let a = tp.constant(Tensor::ones(&[1, 2, 2, 1]));
    let b = tp.constant(Tensor::ones(&[1, 2, 3, 3]));
    assert!(tp.mul(a, b).is_err());
}

#[test]
fn batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[4, 3, 5, 5], &mut rng);
    let y = run(|tp| {
        let xv = tp.constant(x.clone());
        let g = tp.constant(Tensor::ones(&[3]));
        let b = tp.constant(Tensor::zeros(&[3]));
        let (mut m, mut v) = (vec![0.0; 3], vec![1.0; 3]);
        tp.batch_norm(xv, g, b, &mut m, &mut v, Mode::Train).unwrap()
    });
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..25).map(move |i| (n, i))).map(|(n, i)| y.data()[n * 75 + c * 25 + i]).collect();
        let mean = vals.iter().sum::<f64>() / 100.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 100.0;
        assert!(mean.abs() < 1e-6, "{mean}");
        // epsilon 1e-5 in the denominator shrinks the variance slightly
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
    let y = run(|tp| {
        let xv = tp.constant(x.clone());
        let g = tp.constant(Tensor::ones(&[3]));
        let b = tp.constant(Tensor::zeros(&[3]));
        let (mut m, mut v) = (vec![0.0; 3], vec![1.0; 3]);
        tp.batch_norm(xv, g, b, &mut m, &mut v, Mode::Eval).unwrap()
    });
    // identity up to the 1 / sqrt(1 + 1e-5) from the variance epsilon
    let k = libm::sqrt(1.0 + 1e-5);
    assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a * k - b).abs() < 1e-12));
}

#[test]
fn backward_closed_forms_and_accumulation() {
    let x = t(&[3], &[1.0, -2.0, 0.5]);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().with_grad());
    let s = tape.sum(v);
    let g = tape.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(g.get(v).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().with_grad());
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(g.get(v).unwrap(), &[2.0, -4.0, 1.0]);

    // parameter gradients add up over repeated passes
    let mut store = ParamStore::new();
    let id = store.add("w", x.clone());
    for _ in 0..2 {
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let s = tape.sum(w);
        tape.backward(s, &mut store).unwrap();
    }
    assert_eq!(store.get(id).grad(), &[2.0, 2.0, 2.0]);
}

#[test]
fn backward_needs_a_scalar() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::ones(&[2]).with_grad());
    let err = tape.backward(v, &mut ParamStore::new()).unwrap_err();
    assert!(matches!(err, Error::NonScalarLoss { .. }));
}

#[test]
fn forward_is_bit_identical() {
    let cfg = posegraph_core::ModelConfig::default();
    let a = posegraph_core::PoseNet::new(cfg.clone(), 9).unwrap();
    let b = posegraph_core::PoseNet::new(cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[1, 3, 64, 64], &mut rng);
    let pa = a.predict(&x).unwrap();
    let pb = b.predict(&x).unwrap();
    assert_eq!(pa.heatmaps, pb.heatmaps);
    assert_eq!(pa.tags, pb.tags);
}
