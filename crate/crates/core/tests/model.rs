use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssacrnn::model::checkpoint::{self, CheckpointMeta, Stage};
use ssacrnn::model::layers::{classify, crnn_encode, pre_recurrent, self_attention, speaker_attention};
use ssacrnn::model::{
    argmax, forward_em, forward_sp, AttentionKind, AttentionVars, Classifier, ClassifierSpec, ClassifierVars,
    CrnnConfig, ParamSet, SsaVars,
};
use ssacrnn::numerics::{softmax, Tape, Tensor, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn small_crnn() -> CrnnConfig {
    CrnnConfig {
        conv_channels: vec![3, 4],
        linear_units: 6,
        lstm_cells: 3,
        frames: 32,
        mel_bands: 40,
        ..CrnnConfig::default()
    }
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

#[test]
fn full_size_shape_trace() {
    let crnn = CrnnConfig::default();
    assert_eq!(crnn.flattened_width(), 5120);
    let spec = ClassifierSpec::speaker(crnn.clone(), 8);
    let model = Classifier::new(spec.clone(), names(8), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[3, 300, 40], 1.0);

    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let vars = ClassifierVars::from_bound(&spec, &bound);
    let xv = tape.constant(x.clone());
    let (k, b) = vars.convs[0];
    let h = tape.conv2d(xv, k, b).unwrap();
    let mut h = tape.maxpool2(h).unwrap();
    assert_eq!(tape.shape(h), [128, 150, 20]);
    for &(k, b) in &vars.convs[1..] {
        h = tape.conv2d(h, k, b).unwrap();
    }
    assert_eq!(tape.shape(h), [256, 150, 20]);
    let frames = tape.frames_from_channels(h).unwrap();
    assert_eq!(tape.shape(frames), [150, 5120]);
    let lin = pre_recurrent(&mut tape, xv, &crnn, &vars).unwrap();
    assert_eq!(tape.shape(lin), [150, 768]);

    let (h, posteriors) = forward_sp(&model, &x).unwrap();
    assert_eq!(h.shape(), [150, 256]);
    assert_eq!(posteriors.len(), 8);
    assert_eq!(forward_sp(&model, &x).unwrap(), (h, posteriors));
}

#[test]
fn zero_input_and_parameters_give_zero_states() {
    let spec = ClassifierSpec::speaker(small_crnn(), 3);
    let model = Classifier::from_params(spec.clone(), names(3), ParamSet::zeros(&spec)).unwrap();
    let h = model.encode(&Tensor::zeros(&[3, 32, 40])).unwrap();
    assert_eq!(h.shape(), [16, 6]);
    assert!(h.data().iter().all(|&v| v == 0.0));
}

/// Reverses axis 1 of a `[C, T, F]` tensor, or axis 2 of a `[O, I, KT, KF]` kernel.
fn flip_time(t: &Tensor) -> Tensor {
    let s = t.shape().to_vec();
    let (axis, inner) = if s.len() == 3 { (1, s[2]) } else { (2, s[3]) };
    let len = s[axis];
    let outer: usize = s[..axis].iter().product();
    let mut out = vec![0.0; t.len()];
    for o in 0..outer {
        for i in 0..len {
            let src = (o * len + i) * inner;
            let dst = (o * len + (len - 1 - i)) * inner;
            out[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
        }
    }
    Tensor::new(s, out).unwrap()
}

#[test]
fn pre_recurrent_stack_is_time_equivariant() {
    // Same padding makes convolution commute with time reversal once the
    // kernels are mirrored too; pooling and the frame-wise linear map commute
    // as they are.
    let crnn = small_crnn();
    let spec = ClassifierSpec::speaker(crnn.clone(), 3);
    let model = Classifier::new(spec.clone(), names(3), 4).unwrap();
    let mut mirrored = model.params().clone();
    for (name, t) in model.params().names().iter().zip(mirrored.tensors_mut()) {
        if name.ends_with(".kernel") {
            *t = flip_time(t);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 32, 40], 1.0);

    let run = |params: &ParamSet, x: &Tensor| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let vars = ClassifierVars::from_bound(&spec, &bound);
        let xv = tape.constant(x.clone());
        let out = pre_recurrent(&mut tape, xv, &crnn, &vars).unwrap();
        tape.value(out).clone()
    };
    let forward = run(model.params(), &x);
    let reversed = run(&mirrored, &flip_time(&x));
    let (t, d) = (forward.shape()[0], forward.shape()[1]);
    for i in 0..t {
        for j in 0..d {
            let a = forward.data()[i * d + j];
            let b = reversed.data()[(t - 1 - i) * d + j];
            assert!((a - b).abs() < 1e-12, "frame {i} unit {j}: {a} vs {b}");
        }
    }
}

fn attend(h: &Tensor, w: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let wv = tape.constant(w.clone());
    let (a, c) = self_attention(&mut tape, hv, wv).unwrap();
    (tape.value(a).data().to_vec(), tape.value(c).data().to_vec())
}

#[test]
fn zero_scoring_vector_pools_the_frame_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = random(&mut rng, &[7, 4], 3.0);
    let (alpha, c) = attend(&h, &Tensor::zeros(&[4]));
    assert!(alpha.iter().all(|&a| (a - 1.0 / 7.0).abs() < 1e-15));
    for (j, &cj) in c.iter().enumerate() {
        let mean = (0..7).map(|t| h.row(t)[j]).sum::<f64>() / 7.0;
        assert!((cj - mean).abs() < 1e-12);
    }

    // frame order does not matter then
    let mut rows: Vec<Vec<f64>> = (0..7).map(|t| h.row(t).to_vec()).collect();
    rows.reverse();
    rows.swap(0, 3);
    let permuted = Tensor::new(vec![7, 4], rows.concat()).unwrap();
    let (_, c2) = attend(&permuted, &Tensor::zeros(&[4]));
    for (a, b) in c.iter().zip(&c2) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn dominant_frame_takes_all_the_weight() {
    let mut data = vec![0.0; 5 * 3];
    data[2 * 3] = 50.0;
    data[2 * 3 + 1] = -1.0;
    let h = Tensor::new(vec![5, 3], data).unwrap();
    let (alpha, c) = attend(&h, &Tensor::vector(vec![1.0, 0.0, 0.0]));
    assert!(alpha.iter().enumerate().all(|(t, &a)| t == 2 || a < 1e-20));
    assert!((alpha[2] - 1.0).abs() < 1e-15);
    assert!((c[0] - 50.0).abs() < 1e-12 && (c[1] + 1.0).abs() < 1e-12);
}

#[test]
fn score_shift_leaves_weights_unchanged() {
    // adding a constant column to h shifts every score W.h_t by the same amount
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let h = random(&mut rng, &[6, 3], 2.0);
        let w = random(&mut rng, &[3], 2.0);
        let shift = rng.random_range(-5.0..5.0);
        let shifted: Vec<f64> = h
            .data()
            .chunks(3)
            .flat_map(|r| [r[0], r[1], r[2], shift])
            .collect();
        let h4 = Tensor::new(vec![6, 4], shifted).unwrap();
        let w4 = Tensor::vector(vec![w.data()[0], w.data()[1], w.data()[2], 1.0]);
        let (a, _) = attend(&h, &w);
        let (b, _) = attend(&h4, &w4);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

fn ssa_vars(tape: &mut Tape, w: &[Tensor; 5]) -> SsaVars {
    let v: Vec<Var> = w.iter().map(|t| tape.constant(t.clone())).collect();
    SsaVars {
        w_q_em: v[0],
        w_k_em: v[1],
        w_k_sp: v[2],
        w_v_em: v[3],
        w_v_sp: v[4],
    }
}

fn run_ssa(h_em: &Tensor, h_sp: &Tensor, w: &[Tensor; 5]) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let p = ssa_vars(&mut tape, w);
    let a = tape.constant(h_em.clone());
    let b = tape.constant(h_sp.clone());
    let (alpha, c) = speaker_attention(&mut tape, a, b, &p).unwrap();
    (tape.value(alpha).data().to_vec(), tape.value(c).data().to_vec())
}

#[test]
fn zero_speaker_attention_weights_give_zero_context() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h_em = random(&mut rng, &[6, 4], 1.0);
    let h_sp = random(&mut rng, &[6, 4], 1.0);
    let zeros = [(); 5].map(|_| Tensor::zeros(&[4]));
    let (alpha, c) = run_ssa(&h_em, &h_sp, &zeros);
    assert!(alpha.iter().chain(&c).all(|&v| v == 0.0));
}

#[test]
fn speaker_half_can_be_switched_off() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h_em = random(&mut rng, &[6, 4], 1.0);
    let mut w = [(); 5].map(|_| random(&mut rng, &[4], 1.0));
    w[2] = Tensor::zeros(&[4]);
    w[4] = Tensor::zeros(&[4]);
    let a = run_ssa(&h_em, &random(&mut rng, &[6, 4], 1.0), &w);
    let b = run_ssa(&h_em, &random(&mut rng, &[6, 4], 9.0), &w);
    assert_eq!(a, b);
}

#[test]
fn speaker_attention_rejects_frame_mismatch() {
    let mut tape = Tape::new();
    let w = [(); 5].map(|_| Tensor::zeros(&[4]));
    let p = ssa_vars(&mut tape, &w);
    let a = tape.constant(Tensor::zeros(&[6, 4]));
    let b = tape.constant(Tensor::zeros(&[5, 4]));
    assert!(speaker_attention(&mut tape, a, b, &p).is_err());
}

#[test]
fn classification_head_properties() {
    let spec = ClassifierSpec::emotion(small_crnn(), AttentionKind::SelfAttention);
    let zero = Classifier::from_params(spec.clone(), names(4), ParamSet::zeros(&spec)).unwrap();
    let p = zero.predict(&Tensor::zeros(&[3, 32, 40]), None).unwrap();
    assert_eq!(p.posteriors, vec![0.25; 4]);

    let model = Classifier::new(spec.clone(), names(4), 9).unwrap();
    let w = model.params().get("classify.weight").unwrap();
    assert_eq!(w.shape(), [128, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let vars = ClassifierVars::from_bound(&spec, &bound);
        let c = tape.constant(random(&mut rng, &[6], 4.0));
        let (e, logits) = classify(&mut tape, c, &vars).unwrap();
        assert_eq!(tape.shape(e), [128]);
        let l = tape.value(logits).data().to_vec();
        let post = softmax(&l);
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&post), argmax(&l));
    }
}

#[test]
fn emotion_pass_needs_a_frozen_speaker_tower() {
    let crnn = small_crnn();
    let mut sp = Classifier::new(ClassifierSpec::speaker(crnn.clone(), 3), names(3), 1).unwrap();
    let em = Classifier::new(
        ClassifierSpec::emotion(crnn, AttentionKind::SpeakerAttention),
        names(4),
        2,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[3, 32, 40], 1.0);
    assert!(forward_em(&em, &x, Some(&sp)).is_err());
    assert!(forward_em(&em, &x, None).is_err());
    sp.freeze();
    let p = forward_em(&em, &x, Some(&sp)).unwrap();
    assert_eq!(p.posteriors.len(), 4);
    assert!((p.posteriors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(sp.sample_gradient(&x, 0, None).is_err());
}

#[test]
fn emotion_gradients_never_touch_speaker_parameters() {
    let crnn = small_crnn();
    let mut sp = Classifier::new(ClassifierSpec::speaker(crnn.clone(), 3), names(3), 1).unwrap();
    sp.freeze();
    let em = Classifier::new(
        ClassifierSpec::emotion(crnn, AttentionKind::SpeakerAttention),
        names(4),
        2,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[3, 32, 40], 1.0);
    let h_sp = sp.encode(&x).unwrap();

    let mut tape = Tape::new();
    let sp_bound = sp.params().bind(&mut tape, false);
    let sp_vars = ClassifierVars::from_bound(sp.spec(), &sp_bound);
    let xv = tape.constant(x.clone());
    let h = crnn_encode(&mut tape, xv, &sp.spec().crnn, &sp_vars).unwrap();
    assert_eq!(tape.value(h), &h_sp);
    let em_bound = em.params().bind(&mut tape, true);
    let em_vars = ClassifierVars::from_bound(em.spec(), &em_bound);
    assert!(matches!(em_vars.attention, AttentionVars::Speaker(_)));
    let out = em.forward(&mut tape, xv, Some(h), &em_vars).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, &[1]).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(sp_bound.iter().all(|&v| !grads.materialized(v)));
    assert!(em_bound.iter().all(|&v| grads.materialized(v)));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ClassifierSpec::emotion(small_crnn(), AttentionKind::SpeakerAttention);
    let mut model = Classifier::new(spec, names(4), 11).unwrap();
    model.params_mut().round_to_f32();
    let path = dir.path().join("em.ckpt");
    let meta = CheckpointMeta {
        stage: Stage::Em,
        variant: "ssa-crnn-r".into(),
        seed: 11,
        sp_checkpoint_hash: Some("00".into()),
        excluded_speakers: vec!["s1".into()],
        epoch: 3,
        validation_uar: 0.5,
    };
    let hash = checkpoint::save(&path, &model, &meta).unwrap();
    assert_eq!(hash, checkpoint::content_hash(&path).unwrap());
    let (loaded, header) = checkpoint::load(&path).unwrap();
    assert_eq!(header.stage, Stage::Em);
    assert_eq!(header.excluded_speakers, meta.excluded_speakers);
    assert_eq!(loaded.params(), model.params());
    assert_eq!(loaded.class_names(), model.class_names());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(checkpoint::load(&path).is_err());
}
