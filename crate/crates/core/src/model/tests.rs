use super::*;
use crate::corpus::Vocabulary;
use alloc::vec;

fn tiny_vocab() -> Vocabulary {
    // 16 words + 4 specials = vocab of 20
    Vocabulary::build(
        ["the food was great and the staff was friendly but the room felt cold dark tiny loud nice bad"],
        1,
    )
}

fn tiny_config() -> DisAeConfig {
    DisAeConfig {
        embed_dim: 6,
        encoder_hidden: 5,
        attention_dim: 4,
        sentiment_dim: 3,
        content_dim: 4,
        decoder_hidden: 7,
        num_classes: 5,
        ..DisAeConfig::default()
    }
}

fn tiny_model(seed: u64) -> DisAeModel {
    DisAeModel::new(tiny_config(), tiny_vocab(), seed).unwrap()
}

fn zero_param(m: &mut DisAeModel, name: &str) {
    let id = m.params().id_of(name).unwrap();
    for x in &mut m.params_mut().get_mut(id).data {
        *x = 0.0;
    }
}

fn set_param(m: &mut DisAeModel, name: &str, values: &[f64]) {
    let id = m.params().id_of(name).unwrap();
    m.params_mut().get_mut(id).data.copy_from_slice(values);
}

fn pair(m: &DisAeModel) -> PairTokens {
    m.pair_tokens("the food was great", "the food was cold and loud")
}

#[test]
fn vocab_fixture_has_twenty_tokens() {
    assert_eq!(tiny_vocab().len(), 20);
}

#[test]
fn single_token_pooling_is_identity() {
    let m = tiny_model(1);
    let out = m.encode(&[5]).unwrap();
    assert_eq!(out.token_states.len(), 1);
    assert_eq!(out.primitive_rep, out.token_states[0]);
    assert_eq!(out.sentiment_attention, vec![1.0]);
    assert_eq!(out.content_attention, vec![1.0]);
}

#[test]
fn attention_weights_are_normalized() {
    let m = tiny_model(2);
    let ids: Vec<usize> = (0..17).map(|i| 4 + i % 16).collect();
    let out = m.encode(&ids).unwrap();
    assert_eq!(out.token_states.len(), 17);
    for w in [&out.sentiment_attention, &out.content_attention] {
        assert_eq!(w.len(), 17);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let s: f64 = out.factors.y_hat.probs().iter().sum();
    assert!((s - 1.0).abs() < 1e-6);
}

#[test]
fn token_order_matters() {
    let m = tiny_model(3);
    let a = m.encode(&[5, 9]).unwrap();
    let b = m.encode(&[9, 5]).unwrap();
    assert_ne!(a.factors.z_e, b.factors.z_e);
    assert_ne!(a.factors.z_c, b.factors.z_c);
}

#[test]
fn encode_rejects_empty_and_overlong() {
    let m = tiny_model(3);
    assert_eq!(m.encode(&[]), Err(ModelError::EmptyInput));
    let long = vec![5; m.config().max_encode_len + 1];
    assert!(matches!(m.encode(&long), Err(ModelError::InputTooLong { .. })));
}

#[test]
fn classifier_softmax_properties() {
    let mut m = tiny_model(4);
    zero_param(&mut m, "clf.w");
    zero_param(&mut m, "clf.b");
    let p = m.classify(&[0.3, -1.0, 2.0]).unwrap();
    for &x in p.probs() {
        assert!((x - 0.2).abs() < 1e-12);
    }

    let mut m = tiny_model(4);
    let x = [0.3, -1.0, 2.0];
    let before = m.classify(&x).unwrap();
    let id = m.params().id_of("clf.b").unwrap();
    for b in &mut m.params_mut().get_mut(id).data {
        *b += 7.5;
    }
    let after = m.classify(&x).unwrap();
    for (a, b) in before.probs().iter().zip(after.probs()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(m.classify(&[1.0]).is_err());
}

#[test]
fn two_class_softmax_hand_value() {
    let cfg = DisAeConfig {
        num_classes: 2,
        ..tiny_config()
    };
    let mut m = DisAeModel::new(cfg, tiny_vocab(), 5).unwrap();
    zero_param(&mut m, "clf.w");
    set_param(&mut m, "clf.b", &[math::ln(4.0), 0.0]);
    let p = m.classify(&[0.1, 0.2, 0.3]).unwrap();
    assert!((p.probs()[0] - 0.8).abs() < 1e-12);
    assert!((p.probs()[1] - 0.2).abs() < 1e-12);
}

#[test]
fn soft_replace_endpoints_and_mixture() {
    let table = Tensor {
        rows: 2,
        cols: 3,
        data: vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0],
    };
    let one_hot = SentimentDistribution(vec![0.0, 1.0]);
    assert_eq!(soft_replace(&one_hot, &table), vec![3.0, 4.0, -1.0]);
    let uniform = SentimentDistribution::uniform(2);
    assert_eq!(soft_replace(&uniform, &table), vec![2.0, 1.0, -0.25]);
    let mix = soft_replace(&SentimentDistribution(vec![0.8, 0.2]), &table);
    // 0.8 * row0 + 0.2 * row1, by hand
    let expected = [0.8 + 0.6, -1.6 + 0.8, 0.4 - 0.2];
    for (a, b) in mix.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn model_soft_replace_matches_free_function() {
    let m = tiny_model(6);
    let out = m.encode(&m.tokenize("the food was great")).unwrap();
    let direct = soft_replace(&out.factors.y_hat, m.label_table());
    for (a, b) in direct.iter().zip(&out.factors.z_tilde_e) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn teacher_forced_shapes() {
    let m = tiny_model(7);
    let z = vec![0.1; m.config().latent_dim()];
    let steps = m.decode_teacher_forced(&z, &[BOS, EOS]).unwrap();
    assert_eq!(steps.len(), 1);
    let gold = m.tokenize("the food was great");
    let steps = m.decode_teacher_forced(&z, &gold).unwrap();
    assert_eq!(steps.len(), gold.len() - 1);
    for s in &steps {
        assert_eq!(s.len(), 20);
        let total: f64 = s.iter().map(|&lp| math::exp(lp)).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    let mut long = vec![BOS];
    long.extend(core::iter::repeat_n(5, 70));
    long.push(EOS);
    assert!(matches!(
        m.decode_teacher_forced(&z, &long),
        Err(ModelError::GoldTooLong { len: 71, max: 70 })
    ));
    assert_eq!(m.decode_teacher_forced(&z, &[5, EOS]), Err(ModelError::MalformedGold));
}

#[test]
fn beam_width_one_is_greedy() {
    for seed in 0..5 {
        let m = tiny_model(seed);
        let enc = m.encode(&m.tokenize("the staff was friendly")).unwrap();
        let z = enc.factors.joint();
        let greedy = m.decode_greedy(&z, 70).unwrap();
        let beam = m.decode_beam(&z, 1, 70).unwrap();
        assert_eq!(greedy, beam);
    }
}

#[test]
fn beam_is_deterministic_and_bounded() {
    let m = tiny_model(11);
    let z: Vec<f64> = (0..m.config().latent_dim()).map(|i| (i as f64).sin()).collect();
    let a = m.decode_beam(&z, 4, 70).unwrap();
    let b = m.decode_beam(&z, 4, 70).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 70);
    assert!(!a.contains(&EOS) && !a.contains(&BOS));
    assert!(m.decode_beam(&z, 4, 3).unwrap().len() <= 3);
}

#[test]
fn uniform_decoder_reconstruction_is_t_ln_v() {
    let mut m = tiny_model(8);
    zero_param(&mut m, "dec.out.w");
    zero_param(&mut m, "dec.out.b");
    let p = pair(&m);
    let rec = m.loss_reconstruction(&p).unwrap();
    let v = m.vocab().len() as f64;
    let tp = (p.positive.len() - 1) as f64;
    let tn = (p.negative.len() - 1) as f64;
    let expected = (tp + tn) * math::ln(v);
    assert!((rec - expected).abs() < 1e-6, "{rec} vs {expected}");
}

#[test]
fn perfect_decoder_has_zero_reconstruction() {
    let mut m = tiny_model(9);
    zero_param(&mut m, "dec.out.w");
    let mut bias = vec![0.0; 20];
    bias[EOS] = 1000.0;
    set_param(&mut m, "dec.out.b", &bias);
    let p = PairTokens {
        positive: vec![BOS, EOS],
        negative: vec![BOS, EOS],
    };
    assert_eq!(m.loss_reconstruction(&p).unwrap(), 0.0);
    assert_eq!(m.loss_counterfactual(&p).unwrap(), 0.0);
}

#[test]
fn uniform_classifier_emotion_terms_are_ln_m() {
    let mut m = tiny_model(10);
    zero_param(&mut m, "clf.w");
    zero_param(&mut m, "clf.b");
    let b = m.loss_total(&pair(&m), LossWeights::ZERO).unwrap();
    let ln5 = math::ln(5.0);
    assert!((b.emotion - 2.0 * ln5).abs() < 1e-12);
    // one cross-entropy summand per label row
    assert!((b.label - 5.0 * ln5).abs() < 1e-12);
    assert!((m.loss_emotion(&pair(&m)).unwrap() - 7.0 * ln5).abs() < 1e-12);
    assert!(b.neutrality.abs() < 1e-12);
    assert!((1.609_437_9 - ln5).abs() < 1e-6);
}

#[test]
fn confident_classifier_has_zero_emotion_loss() {
    let cfg = DisAeConfig {
        num_classes: 2,
        ..tiny_config()
    };
    let mut m = DisAeModel::new(cfg, tiny_vocab(), 12).unwrap();
    // Route classification through the label rows only: rows are +-e1, classifier reads e1.
    zero_param(&mut m, "clf.w");
    zero_param(&mut m, "clf.b");
    set_param(&mut m, "clf.w", &[-1e4, 0.0, 0.0, 1e4, 0.0, 0.0]);
    set_param(&mut m, "labels", &[-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let b = m.loss_total(&pair(&m), LossWeights::ZERO).unwrap();
    assert!(b.label.abs() < 1e-12);
}

#[test]
fn neutrality_hand_value_two_classes() {
    let cfg = DisAeConfig {
        num_classes: 2,
        ..tiny_config()
    };
    let mut m = DisAeModel::new(cfg, tiny_vocab(), 13).unwrap();
    zero_param(&mut m, "clf.w");
    set_param(&mut m, "clf.b", &[math::ln(4.0), 0.0]);
    let n = m.loss_neutrality(&pair(&m)).unwrap();
    // 0.5 ln(0.5/0.8) + 0.5 ln(0.5/0.2), evaluated by hand: 0.5 ln 1.5625
    let per_term = 0.223_143_551_314_209_7;
    assert!((n / 2.0 - per_term).abs() < 1e-12);
    assert!((n / 2.0 - 0.2231).abs() < 1e-3);
}

#[test]
fn distance_loss_extremes() {
    let f = |ze: Vec<f64>, zc: Vec<f64>| LatentFactors {
        z_e: ze,
        z_c: zc,
        z_tilde_e: vec![],
        y_hat: SentimentDistribution::uniform(2),
    };
    let p = f(vec![2.0, 0.0], vec![0.0, -4.0, 0.0]);
    let n = f(vec![-1.0, 0.0], vec![0.0, -1.0, 0.0]);
    assert_eq!(loss_distance(&p, &n).unwrap(), 0.0);
    assert_eq!(loss_distance(&p, &p.clone()).unwrap(), 2.0);
    let a = f(vec![1.0, 0.0], vec![0.0, 1.0, 0.0]);
    let b = f(vec![0.0, 1.0], vec![1.0, 0.0, 0.0]);
    assert_eq!(loss_distance(&a, &b).unwrap(), 2.0);
    let z = f(vec![0.0, 0.0], vec![1.0, 0.0, 0.0]);
    assert!(matches!(loss_distance(&z, &a), Err(ModelError::ZeroNormLatent(_))));
}

#[test]
fn counterfactual_equals_reconstruction_when_contents_coincide() {
    let m = tiny_model(14);
    let p = m.pair_tokens("the room felt dark", "the room felt dark");
    let b = m.loss_total(&p, LossWeights::ZERO).unwrap();
    assert!((b.rec - b.counterfactual).abs() < 1e-12);
    assert!(b.rec >= 0.0 && b.counterfactual >= 0.0 && b.neutrality >= 0.0);
}

#[test]
fn total_combines_terms_linearly() {
    let m = tiny_model(15);
    let p = pair(&m);
    let zero = m.loss_total(&p, LossWeights::ZERO).unwrap();
    assert_eq!(zero.total, zero.rec);

    let w1 = LossWeights {
        alpha: 1.5,
        beta: 0.3,
        gamma: 0.7,
    };
    let w2 = LossWeights { alpha: 3.0, ..w1 };
    let b1 = m.loss_total(&p, w1).unwrap();
    let b2 = m.loss_total(&p, w2).unwrap();
    let emo = b1.emotion + b1.neutrality + b1.label;
    let expected = b1.rec + 1.5 * emo + 0.3 * b1.distance + 0.7 * b1.counterfactual;
    assert!((b1.total - expected).abs() < 1e-9);
    let group1 = b1.total - b1.rec - 0.3 * b1.distance - 0.7 * b1.counterfactual;
    let group2 = b2.total - b2.rec - 0.3 * b2.distance - 0.7 * b2.counterfactual;
    assert!((group2 - 2.0 * group1).abs() < 1e-9);
    assert!(b1.distance >= 0.0 && b1.distance <= 4.0);
}

#[test]
fn gradients_match_finite_differences() {
    let m = tiny_model(21);
    let p = pair(&m);
    let w = LossWeights {
        alpha: 5.0,
        beta: 1.0,
        gamma: 1.0,
    };
    let mut grads = Grads::zeros(m.params());
    m.accumulate_gradients(&p, w, 1.0, &mut grads).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let store = m.params().clone();
    let mut checked = 0;
    while checked < 10 {
        let pid = ParamId(rng.gen_range(0..store.len()));
        let k = rng.gen_range(0..store.get(pid).len());
        let analytic = grads.get(pid)[k];
        let eval = |delta: f64| {
            let mut mm = m.clone();
            mm.params_mut().get_mut(pid).data[k] += delta;
            mm.loss_total(&p, w).unwrap().total
        };
        let h = 1e-5;
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let denom = fd.abs().max(analytic.abs()).max(1e-8);
        let rel = (fd - analytic).abs() / denom;
        assert!(
            rel < 1e-3 || (fd - analytic).abs() < 1e-9,
            "{}[{k}]: analytic {analytic} fd {fd}",
            store.name(pid)
        );
        checked += 1;
    }
}

#[test]
fn rating_classes() {
    assert_eq!(rating_class(5, 5), 4);
    assert_eq!(rating_class(1, 5), 0);
    assert_eq!(rating_class(5, 2), 1);
    assert_eq!(rating_class(1, 2), 0);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn distributions_sum_to_one(xs in proptest::collection::vec(-50.0f64..50.0, 3)) {
            let m = tiny_model(30);
            let p = m.classify(&xs).unwrap();
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.probs().iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn soft_replacement_stays_in_hull(raw in proptest::collection::vec(0.0f64..1.0, 5)) {
            let m = tiny_model(31);
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let dist = SentimentDistribution(raw.iter().map(|x| (x + 1e-9 / 5.0) / s).collect());
            let t = m.label_table();
            let z = soft_replace(&dist, t);
            for (j, &zj) in z.iter().enumerate() {
                let col: Vec<f64> = (0..t.rows).map(|i| t.row(i)[j]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(zj >= lo - 1e-12 && zj <= hi + 1e-12);
            }
        }

        #[test]
        fn distance_in_range(a in proptest::collection::vec(-5.0f64..5.0, 4),
                             b in proptest::collection::vec(-5.0f64..5.0, 4)) {
            prop_assume!(math::norm(&a[..2]) > 1e-6 && math::norm(&b[..2]) > 1e-6);
            prop_assume!(math::norm(&a[2..]) > 1e-6 && math::norm(&b[2..]) > 1e-6);
            let f = |v: &[f64]| LatentFactors {
                z_e: v[..2].to_vec(),
                z_c: v[2..].to_vec(),
                z_tilde_e: vec![],
                y_hat: SentimentDistribution::uniform(2),
            };
            let d = loss_distance(&f(&a), &f(&b)).unwrap();
            prop_assert!((-1e-12..=4.0 + 1e-12).contains(&d));
        }
    }
}
