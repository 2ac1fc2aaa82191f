use posegraph_core::backbone::{Backbone, FeaturePyramid};
use posegraph_core::config::BlockSchema;
use posegraph_core::grm::{compose_attention, ChannelAttention, Grm, SeBlock, SpatialAttention};
use posegraph_core::mfa::Mfa;
use posegraph_core::nn::{Builder, Ctx};
use posegraph_core::tape::sigmoid;
use posegraph_core::{Mode, ModelConfig, ParamStore, PoseNet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn value(tape: &Tape, v: Var) -> Tensor {
    tape.value(v).clone()
}

#[test]
fn relation_and_dense_blocks_keep_shape() {
    for c in [8, 16, 32] {
        let mut store = ParamStore::new();
        let mut r = rng(c as u64);
        let (grm, mfa) = {
            let mut b = Builder::new(&mut store, &mut r);
            (Grm::new(&mut b, "grm", c).unwrap(), Mfa::new(&mut b, "mfa", c).unwrap())
        };
        let shape = [2, c, 6, 5];
        let mut tape = Tape::inference();
        let ps: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::randn(&shape, &mut r))).collect();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Train);
        let pyr = FeaturePyramid { p1: ps[0], p2: ps[1], p3: ps[2] };
        let trace = grm.forward_traced(&mut cx, &pyr).unwrap();
        let m = mfa.forward(&mut cx, ps[2]).unwrap();
        assert_eq!(tape.shape(trace.output), shape);
        assert_eq!(tape.shape(m), shape);

        let ach = value(&tape, trace.channel.map);
        let asp = value(&tape, trace.spatial.map);
        assert_eq!(ach.shape(), &[2, c, 1, 1]);
        assert_eq!(asp.shape(), &[2, 1, 6, 5]);
        assert!(ach.data().iter().chain(asp.data()).all(|&v| v > 0.0 && v < 1.0));

        for w in [trace.channel.weights, trace.spatial.weights] {
            let t = value(&tape, w);
            let len = *t.shape().last().unwrap();
            for slice in t.data().chunks(len) {
                assert!((slice.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        // both factors lie in (0, 1), so |F| < 2|X| wherever X is nonzero
        let x = value(&tape, trace.fused);
        let f = value(&tape, trace.output);
        for (a, b) in f.data().iter().zip(x.data()) {
            assert!(a.abs() < 2.0 * b.abs() || *b == 0.0);
        }
    }
}

#[test]
fn half_and_half_attention_is_identity() {
    let mut r = rng(1);
    let x = Tensor::randn(&[2, 4, 3, 3], &mut r);
    let store = ParamStore::new();
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let ach = tape.constant(Tensor::full(&[2, 4, 1, 1], 0.5));
    let asp = tape.constant(Tensor::full(&[2, 1, 3, 3], 0.5));
    let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
    let y = compose_attention(&mut cx, xv, ach, asp).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn recalibration_of_zeros_is_half() {
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut Builder::new(&mut store, &mut rng(2)), "se", 4);
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[1, 4, 3, 3]));
    let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
    let y = se.forward(&mut cx, x).unwrap();
    let y = value(&tape, y);
    let w = store.get(se.post.weight).tensor.data();
    let b = store.get(se.post.bias.unwrap()).tensor.data();
    for o in 0..4 {
        let expect = (0..4).map(|i| w[o * 4 + i] * 0.5).sum::<f64>() + b[o];
        assert!(y.data()[o * 9..(o + 1) * 9].iter().all(|&v| (v - expect).abs() < 1e-15));
    }
}

#[test]
fn channel_attention_on_uniform_map_by_hand() {
    let mut store = ParamStore::new();
    let ch = ChannelAttention::new(&mut Builder::new(&mut store, &mut rng(3)), "ch", 2);
    let (a, b) = (0.8, -1.3);
    let mut data = vec![a; 4];
    data.extend([b; 4]);
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::new(&[1, 2, 2, 2], data).unwrap());
    let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
    let att = ch.forward(&mut cx, x).unwrap();
    let weights = value(&tape, att.weights);
    assert!(weights.data().iter().all(|&w| (w - 0.25).abs() < 1e-15));

    let p = |id| store.get(id).tensor.data().to_vec();
    let (wv, bv) = (p(ch.value.weight), p(ch.value.bias.unwrap()));
    let (wl, bl) = (p(ch.lift.weight), p(ch.lift.bias.unwrap()));
    // one value channel, constant over space, so the softmax-weighted mean is the value itself
    let v = wv[0] * a + wv[1] * b + bv[0];
    let map = value(&tape, att.map);
    for c in 0..2 {
        assert!((map.data()[c] - sigmoid(wl[c] * v + bl[c])).abs() < 1e-15);
    }
}

#[test]
fn spatial_attention_with_one_value_channel() {
    let mut store = ParamStore::new();
    let sp = SpatialAttention::new(&mut Builder::new(&mut store, &mut rng(4)), "sp", 2);
    let mut r = rng(5);
    let x = Tensor::randn(&[1, 2, 3, 3], &mut r);
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
    let att = sp.forward(&mut cx, xv).unwrap();
    assert_eq!(value(&tape, att.weights).data(), &[1.0]);
    let w = store.get(sp.value.weight).tensor.data();
    let b = store.get(sp.value.bias.unwrap()).tensor.data()[0];
    let map = value(&tape, att.map);
    for i in 0..9 {
        let v = w[0] * x.data()[i] + w[1] * x.data()[9 + i] + b;
        assert!((map.data()[i] - sigmoid(v)).abs() < 1e-15);
    }
}

#[test]
fn relation_fusion_is_batch_equivariant() {
    let mut store = ParamStore::new();
    let grm = Grm::new(&mut Builder::new(&mut store, &mut rng(6)), "grm", 4).unwrap();
    let mut r = rng(7);
    let items: Vec<[Tensor; 3]> = (0..3)
        .map(|_| [0, 1, 2].map(|_| Tensor::randn(&[4, 3, 3], &mut r)))
        .collect();
    let run = |order: &[usize]| {
        let mut tape = Tape::inference();
        let level = |tape: &mut Tape, l: usize| {
            let t: Vec<Tensor> = order.iter().map(|&i| items[i][l].clone()).collect();
            tape.constant(Tensor::stack(&t).unwrap())
        };
        let pyr = FeaturePyramid { p1: level(&mut tape, 0), p2: level(&mut tape, 1), p3: level(&mut tape, 2) };
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let y = grm.fuse_stages(&mut cx, &pyr).unwrap();
        value(&tape, y)
    };
    let a = run(&[0, 1, 2]);
    let b = run(&[2, 0, 1]);
    for (pos, &i) in [2usize, 0, 1].iter().enumerate() {
        assert_eq!(b.batch_item(pos).unwrap(), a.batch_item(i).unwrap());
    }
}

#[test]
fn zero_parameter_dense_block_outputs_zero() {
    let mut store = ParamStore::new();
    let mfa = Mfa::new(&mut Builder::new(&mut store, &mut rng(8)), "mfa", 8).unwrap();
    store.fill_zero();
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::randn(&[2, 8, 4, 4], &mut rng(9)));
    let mut cx = Ctx::new(&mut tape, &store, Mode::Train);
    let y = mfa.forward(&mut cx, x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

/// A dense block whose entry convolution passes channels through, so the
/// branch slices are the input's channel groups.
fn pass_through_mfa(seed: u64) -> (ParamStore, Mfa) {
    let mut store = ParamStore::new();
    let mfa = Mfa::new(&mut Builder::new(&mut store, &mut rng(seed)), "mfa", 8).unwrap();
    let w = store.get_mut(mfa.entry.weight).tensor.data_mut();
    w.fill(0.0);
    for c in 0..8 {
        w[c * 8 + c] = 1.0;
    }
    store.get_mut(mfa.entry.bias.unwrap()).tensor.data_mut().fill(0.0);
    (store, mfa)
}

#[test]
fn first_slice_reaches_every_branch() {
    let (store, mfa) = pass_through_mfa(10);
    let base = Tensor::randn(&[1, 8, 4, 4], &mut rng(11));
    let outputs = |x: &Tensor| {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let tr = mfa.forward_traced(&mut cx, v).unwrap();
        tr.branch_outputs.iter().map(|&o| value(&tape, o)).collect::<Vec<_>>()
    };
    let before = outputs(&base);
    let mut bumped = base.clone();
    // first slice: channels 0..2
    for v in &mut bumped.data_mut()[..2 * 16] {
        *v += 0.5;
    }
    let after = outputs(&bumped);
    for (b, (x, y)) in before.iter().zip(&after).enumerate() {
        assert!(x.max_abs_diff(y).unwrap() > 1e-6, "branch {b} did not react");
    }
}

#[test]
fn every_dense_layer_receives_gradient() {
    let (mut store, mfa) = pass_through_mfa(12);
    let x = Tensor::randn(&[2, 8, 4, 4], &mut rng(13));
    for b in 1..4 {
        store.zero_grad();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let mut cx = Ctx::new(&mut tape, &store, Mode::Train);
        let tr = mfa.forward_traced(&mut cx, v).unwrap();
        let out = posegraph_core::gradcheck::project(&mut tape, tr.branch_outputs[b]).unwrap();
        tape.backward(out, &mut store).unwrap();
        for (l, layer) in mfa.branches[b].iter().enumerate() {
            let g = store.get(layer.conv.weight).grad();
            assert!(g.iter().any(|&v| v != 0.0), "branch {b} layer {l}");
        }
    }
}

fn pyramid_shapes(config: &ModelConfig, n: usize, h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut Builder::new(&mut store, &mut rng(14)), config).unwrap();
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::randn(&[n, 3, h, w], &mut rng(15)));
    let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
    let p = bb.forward(&mut cx, x).unwrap();
    [p.p1, p.p2, p.p3].iter().map(|&v| tape.shape(v).to_vec()).collect()
}

#[test]
fn desk_backbone_shapes() {
    let cfg = ModelConfig::default();
    for s in pyramid_shapes(&cfg, 1, 64, 64) {
        assert_eq!(s, [1, 16, 16, 16]);
    }
    for s in pyramid_shapes(&cfg, 4, 64, 64) {
        assert_eq!(s, [4, 16, 16, 16]);
    }
    for s in pyramid_shapes(&cfg, 1, 128, 64) {
        assert_eq!(s, [1, 16, 32, 16]);
    }
}

#[test]
fn shrunken_layout_and_parameter_saving() {
    let ours = ModelConfig {
        block_counts: ModelConfig::shrunken_blocks(),
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut Builder::new(&mut store, &mut rng(16)), &ours).unwrap();
    let lens: Vec<usize> = bb.stages[1].blocks.iter().map(|b| b.len()).collect();
    assert_eq!(lens, [0, 4]);

    let original = ModelConfig {
        block_counts: ModelConfig::original_blocks(),
        schema: BlockSchema::Full,
        ..ModelConfig::default()
    };
    assert!(original.clone().validate().is_ok());
    let rejected = ModelConfig { schema: BlockSchema::Shrunken, ..original.clone() };
    assert!(rejected.validate().is_err());
    let a = PoseNet::new(ours, 0).unwrap().param_count();
    let b = PoseNet::new(original, 0).unwrap().param_count();
    assert!(a < b, "{a} vs {b}");
}

#[test]
fn zero_convolutions_give_zero_pyramid() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut Builder::new(&mut store, &mut rng(17)), &cfg).unwrap();
    for p in store.params_mut() {
        if !p.name.ends_with("gamma") {
            p.tensor.data_mut().fill(0.0);
        }
    }
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
    let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
    let p = bb.forward(&mut cx, x).unwrap();
    for v in [p.p1, p.p2, p.p3] {
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn last_level_gradient_reaches_stem() {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut Builder::new(&mut store, &mut rng(18)), &cfg).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::randn(&[2, 3, 64, 64], &mut rng(19)));
    let mut cx = Ctx::new(&mut tape, &store, Mode::Train);
    let p = bb.forward(&mut cx, x).unwrap();
    let s = posegraph_core::gradcheck::project(&mut tape, p.p3).unwrap();
    tape.backward(s, &mut store).unwrap();
    for conv in &bb.stem {
        assert!(store.get(conv.conv.weight).grad().iter().any(|&g| g != 0.0));
    }
}
