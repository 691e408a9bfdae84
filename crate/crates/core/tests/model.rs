use cfnet::losses::{compound, l_align, l_con, l_rec, l_sep, Components, LossWeights};
use cfnet::model::{average_scales, Attention, CfNet, Classifier, ClassifierConfig, EncoderConfig};
use cfnet::ndgrad::{ParamSet, Tape, Tensor};
use cfnet::rng;

fn small() -> EncoderConfig {
    EncoderConfig { channels: [2, 4, 6, 8, 10] }
}

fn images(n: usize, seed: u64) -> Tensor<f32> {
    images_of(n, 32, seed)
}

fn images_of(n: usize, side: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(&[n, 1, side, side], 0.0, 1.0, &mut rng::stream(seed, &[]))
}

#[test]
fn constant_keys_give_value_mean() {
    // Every key/value token identical: the softmax is uniform whatever the
    // query, so the output is query + W_O (W_V^T kv) for every position.
    let c = 3;
    let mut ps = ParamSet::new();
    let attn = Attention::new(&mut ps, "a", c, &mut rng::stream(1, &[]));
    let q = Tensor::uniform(&[1, c, 2, 2], -1.0, 1.0, &mut rng::stream(2, &[]));
    let kv_token = [0.3f32, -0.7, 1.1];
    let kv = Tensor::new(&[1, c, 2, 2], kv_token.iter().flat_map(|&v| [v; 4]).collect()).unwrap();
    let mut tape = Tape::new();
    let (qv, kvv) = (tape.input(q.clone()), tape.input(kv));
    let out = attn.forward(&mut tape, &ps, qv, kvv).unwrap();
    for w in tape.value(out.weights).data() {
        assert!((w - 0.25).abs() < 1e-6);
    }
    let (wv, wo) = (ps.get("a.wv").unwrap().data(), ps.get("a.wo").unwrap().data());
    // Row-vector convention: token @ W.
    let v: Vec<f32> = (0..c).map(|j| (0..c).map(|i| kv_token[i] * wv[i * c + j]).sum()).collect();
    let o: Vec<f32> = (0..c).map(|j| (0..c).map(|i| v[i] * wo[i * c + j]).sum()).collect();
    let got = tape.value(out.fused).data();
    for ch in 0..c {
        for p in 0..4 {
            let want = q.data()[ch * 4 + p] + o[ch];
            assert!((got[ch * 4 + p] - want).abs() < 1e-5, "channel {ch} position {p}");
        }
    }
}

#[test]
fn compound_loss_reaches_every_parameter() {
    // 64x64 inputs leave a 2x2 bottleneck; a single token would make the
    // attention softmax constant and starve the query/key projections.
    let net = CfNet::new(small(), 3).unwrap();
    let mut tape = Tape::new();
    let (x16, x1) = (tape.input(images_of(4, 64, 1)), tape.input(images_of(4, 64, 2)));
    let o = net.forward(&mut tape, x16, x1).unwrap();
    let pooled = tape.global_avg_pool(o.f_s).unwrap();
    let c = Components {
        rec: l_rec(&mut tape, o.x_s, x16).unwrap(),
        con: l_con(&mut tape, o.x_t, o.x_s).unwrap(),
        align: l_align(&mut tape, o.f_t, o.f_s).unwrap(),
        sep: l_sep(&mut tape, pooled, &[0, 0, 1, 1], 0.2, true).unwrap(),
    };
    let total = compound(&mut tape, &c, &LossWeights::default()).unwrap();
    let g = tape.backward(total).unwrap();
    let got: Vec<_> = g.params().map(|(id, _)| id).collect();
    for (group, ids) in net.groups() {
        for id in ids {
            assert!(got.contains(&id), "{group}: {} has no gradient", net.params.name(id));
            let t = g.param(id).unwrap();
            let norm: f32 = t.data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{} has a zero gradient", net.params.name(id));
        }
    }
}

#[test]
fn frozen_backbone_gets_no_gradient() {
    let cfg = ClassifierConfig { num_classes: 3, hog_dim: Some(5), embed_dim: 8, hog_hidden: 6, ..Default::default() };
    let mut clf = Classifier::new(small(), cfg, 4).unwrap();
    clf.set_backbone_trainable(false);
    let mut tape = Tape::new();
    let x = tape.input(images(2, 5));
    let h = tape.input(Tensor::uniform(&[2, 5], 0.0, 1.0, &mut rng::stream(6, &[])));
    let logits = clf.forward(&mut tape, x, Some(h)).unwrap();
    let l = tape.sum_all(logits).unwrap();
    let g = tape.backward(l).unwrap();
    for id in clf.backbone_ids() {
        assert!(g.param(id).is_none(), "{} received a gradient", clf.params.name(id));
    }
    for id in clf.head_ids() {
        assert!(g.param(id).is_some(), "{} missing a gradient", clf.params.name(id));
    }
}

#[test]
fn scale_average_is_order_free_and_trivial_for_one() {
    let mut tape = Tape::<f32>::new();
    let vs: Vec<_> = (0..5).map(|k| tape.input(Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng::stream(k, &[])))).collect();
    let a = average_scales(&mut tape, &vs).unwrap();
    let rev: Vec<_> = vs.iter().rev().copied().collect();
    let b = average_scales(&mut tape, &rev).unwrap();
    for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
        assert!((x - y).abs() < 1e-6);
    }
    let one = average_scales(&mut tape, &vs[..1]).unwrap();
    assert_eq!(tape.value(one), tape.value(vs[0]));
}

#[test]
fn single_scale_uses_only_the_deepest_stage() {
    let cfg = ClassifierConfig { num_classes: 3, hog_dim: None, scales_used: 1, embed_dim: 8, ..Default::default() };
    let clf = Classifier::new(small(), cfg, 4).unwrap();
    let names: Vec<_> = clf.params.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with("scale")).collect();
    assert!(!names.is_empty() && names.iter().all(|n| n.starts_with("scale4")), "{names:?}");
}

#[test]
fn batched_logits_match_single_samples() {
    let cfg = ClassifierConfig { num_classes: 4, hog_dim: Some(3), embed_dim: 8, hog_hidden: 5, ..Default::default() };
    let clf = Classifier::new(small(), cfg, 9).unwrap();
    let x = images(3, 7);
    let h = Tensor::uniform(&[3, 3], 0.0, 1.0, &mut rng::stream(8, &[]));
    let all = clf.predict_logits(&x, Some(&h)).unwrap();
    for i in 0..3 {
        let xi = Tensor::new(&[1, 1, 32, 32], x.data()[i * 1024..(i + 1) * 1024].to_vec()).unwrap();
        let hi = Tensor::new(&[1, 3], h.data()[i * 3..(i + 1) * 3].to_vec()).unwrap();
        let one = clf.predict_logits(&xi, Some(&hi)).unwrap();
        for (a, b) in one.data().iter().zip(&all.data()[i * 4..(i + 1) * 4]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn student_reconstruction_is_batch_consistent() {
    let net = CfNet::new(small(), 1).unwrap();
    let x = images(2, 3);
    let both = net.student_reconstruct(&x).unwrap();
    let first = net.student_reconstruct(&Tensor::new(&[1, 1, 32, 32], x.data()[..1024].to_vec()).unwrap()).unwrap();
    for (a, b) in first.data().iter().zip(&both.data()[..1024]) {
        assert!((a - b).abs() < 1e-5);
    }
}
