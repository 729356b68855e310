use proptest::prelude::*;
use ttt_core::config::KvMap;
use ttt_core::data::{decode, encode, gen_niah_at, Corpus, NiahKind, BOS};
use ttt_core::eval::{nucleus, sampling_probs, SamplerConfig};
use ttt_core::model::{Attention, FastFraction, Model, ModelSpec, Variant};
use ttt_core::train::{clip_global_norm, lr_at, split_seed, TrainRecipe};
use ttt_core::ttt::{inner_step, loss_e2e, loss_naive, TttConfig, TttSession};
use ttt_core::Tensor;

fn tiny(attention: Attention, variant: Variant) -> Model {
    Model::new(&ModelSpec {
        n_blocks: 2,
        embed_dim: 4,
        n_heads: 2,
        vocab_size: 7,
        attention,
        ttt_variant: variant,
        fast_fraction: FastFraction::Half,
        dual_mlp: false,
        mlp_hidden_dim: 8,
        qk_norm: true,
        rope_theta: 10_000.0,
        mh_expansion: 1,
        norm_eps: 1e-6,
    })
    .unwrap()
}

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![
        Just(Variant::E2e),
        Just(Variant::Naive),
        Just(Variant::E2eAllLayersMh),
        Just(Variant::Kvb),
        Just(Variant::KvbSimplified),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nucleus_is_minimal_sorted_and_normalized(
        raw in prop::collection::vec(0.0f64..1.0, 1..40),
        top_p in 0.01f64..=1.0,
    ) {
        let z: f64 = raw.iter().sum::<f64>() + 1e-3;
        let p: Vec<f64> = raw.iter().map(|x| (x + 1e-3 / raw.len() as f64) / z).collect();
        let kept = nucleus(&p, top_p);
        let mass: f64 = kept.iter().map(|&(i, _)| p[i]).sum();
        prop_assert!(mass >= top_p - 1e-12 || kept.len() == p.len());
        prop_assert!(mass - p[kept.last().unwrap().0] < top_p);
        prop_assert!((kept.iter().map(|k| k.1).sum::<f64>() - 1.0).abs() < 1e-12);
        for w in kept.windows(2) {
            prop_assert!(p[w[0].0] >= p[w[1].0]);
        }
    }

    #[test]
    fn sampling_probs_form_a_distribution(
        logits in prop::collection::vec(-20.0f64..20.0, 1..30),
        temperature in 0.05f64..3.0,
        penalty in 1.0f64..3.0,
        history in prop::collection::vec(0u32..30, 0..10),
    ) {
        let cfg = SamplerConfig { temperature, top_p: 1.0, repetition_penalty: penalty };
        let p = sampling_probs(&logits, &cfg, &history).unwrap();
        prop_assert_eq!(p.len(), logits.len());
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_step_is_identity(vals in prop::collection::vec(-5.0f64..5.0, 1..20), g in -5.0f64..5.0) {
        let w = Tensor::from_vec(vals.clone());
        let grad = Tensor::from_vec(vec![g; vals.len()]);
        prop_assert_eq!(&inner_step(std::slice::from_ref(&w), std::slice::from_ref(&grad), 0.0).unwrap()[0], &w);
        let stepped = inner_step(&[w], &[grad], 0.5).unwrap().remove(0);
        for (a, b) in stepped.data().iter().zip(&vals) {
            prop_assert!((a - (b - 0.5 * g)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rate_objectives_agree(v in variant(), toks in prop::collection::vec(0u32..7, 2..14), b in 1usize..6, seed in 0u64..1000) {
        let m = tiny(Attention::Full, v);
        let p = m.init(seed);
        let cfg = TttConfig { eta: 0.0, batch_b: b, ..TttConfig::default() };
        prop_assert_eq!(loss_e2e(&m, &p, &toks, &cfg).unwrap(), loss_naive(&m, &p, &toks).unwrap());
    }

    #[test]
    fn wide_window_is_full_attention(toks in prop::collection::vec(0u32..7, 1..16), extra in 0usize..8, seed in 0u64..1000) {
        let full = tiny(Attention::Full, Variant::Off);
        let swa = tiny(Attention::Sliding(toks.len() + extra), Variant::Off);
        let p = full.init(seed);
        let a = full.forward(&p, &toks).unwrap();
        let b = swa.forward(&p, &toks).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn session_losses_are_causal(
        v in variant(),
        toks in prop::collection::vec(0u32..7, 3..14),
        b in 1usize..4,
        pos in 0usize..100,
        seed in 0u64..1000,
    ) {
        let m = tiny(Attention::Sliding(4), v);
        let p = m.init(seed);
        let cfg = TttConfig { eta: 0.5, batch_b: b, ..TttConfig::default() };
        let losses = |t: &[u32]| {
            let mut s = TttSession::new(&m, &p, &cfg).unwrap();
            s.feed_all(t).unwrap();
            (s.all_losses().unwrap(), s.params().clone())
        };
        let s = 1 + pos % (toks.len() - 1);
        let mut other = toks.clone();
        other[s] = (other[s] + 1) % 7;
        let (a, pa) = losses(&toks);
        let (bl, pb) = losses(&other);
        for i in 0..s - 1 {
            prop_assert_eq!(a[i], bl[i]);
        }
        for i in pa.slow_indices() {
            prop_assert_eq!(pa.tensor(i), p.tensor(i));
            prop_assert_eq!(pb.tensor(i), p.tensor(i));
        }
    }

    #[test]
    fn schedule_stays_within_bounds(steps in 1usize..400, warm in 0.0f64..0.5, peak in 1e-4f64..1e-2) {
        let r = TrainRecipe { batch_tokens: 10, total_tokens: 10 * steps, warmup_fraction: warm, peak_lr: peak, ..TrainRecipe::default() };
        for s in 0..steps {
            let lr = lr_at(s, &r).unwrap();
            prop_assert!((0.0..=peak + 1e-15).contains(&lr));
        }
        prop_assert!(lr_at(steps, &r).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm(vals in prop::collection::vec(-100.0f64..100.0, 1..30), cap in 0.1f64..10.0) {
        let mut g = vec![Tensor::from_vec(vals)];
        let before = clip_global_norm(&mut g, cap);
        let after = g[0].sq_norm().sqrt();
        prop_assert!(after <= cap * (1.0 + 1e-12) || (after - before).abs() < 1e-12);
    }

    #[test]
    fn kv_text_roundtrips(entries in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z_]{1,8})?", "[A-Za-z0-9_.,/-]{0,12}", 0..10)) {
        let mut kv = KvMap::new();
        for (k, v) in &entries {
            kv.set(k, v);
        }
        prop_assert_eq!(KvMap::parse(&kv.to_string()).unwrap(), kv);
    }

    #[test]
    fn bytes_roundtrip(text in "\\PC{0,64}") {
        let ids = encode(&text);
        prop_assert!(ids.iter().all(|&i| i < BOS));
        prop_assert_eq!(decode(&ids), text);
    }

    #[test]
    fn packed_sequences_start_with_bos(t in 2usize..64, seed in 0u64..50) {
        let docs: Vec<String> = (0..5).map(|i| "abc ".repeat(10 + i * 7)).collect();
        let c = Corpus::from_docs(docs.into_iter().map(String::into_bytes).collect());
        for s in c.pack(1, t, seed).unwrap() {
            prop_assert_eq!(s.tokens.len(), t + 1);
            prop_assert_eq!(s.tokens[0], BOS);
        }
    }

    #[test]
    fn needles_are_recoverable(haystack in 160usize..600, seed in 0u64..10_000, depth in 0.0f64..=1.0) {
        for kind in NiahKind::ALL {
            let inst = gen_niah_at(kind, haystack, seed, Some(depth)).unwrap();
            let prompt = decode(&inst.prompt()[1..]);
            let needle = format!("{}{}", kind.key(), inst.answer);
            prop_assert!(prompt.contains(&needle));
            prop_assert!(inst.needle_distance() <= haystack);
        }
    }

    #[test]
    fn seed_streams_are_stable_and_distinct(root in any::<u64>(), a in "[a-z]{1,8}", b in "[a-z]{1,8}") {
        prop_assert_eq!(split_seed(root, &a), split_seed(root, &a));
        if a != b {
            prop_assert_ne!(split_seed(root, &a), split_seed(root, &b));
        }
    }
}
