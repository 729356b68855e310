use super::*;

fn small(attention: Attention, variant: Variant) -> ModelSpec {
    ModelSpec {
        n_blocks: 2,
        embed_dim: 8,
        n_heads: 2,
        vocab_size: 11,
        attention,
        ttt_variant: variant,
        fast_fraction: FastFraction::Half,
        dual_mlp: false,
        mlp_hidden_dim: 24,
        qk_norm: true,
        rope_theta: 10_000.0,
        mh_expansion: 2,
        norm_eps: 1e-6,
    }
}

fn tokens(n: usize, v: u32, seed: u32) -> Vec<u32> {
    (0..n as u32)
        .map(|i| (i * 7 + seed * 3 + (i * i) % 5) % v)
        .collect()
}

fn chunked_logits(model: &Model, params: &ParamSet, inputs: &[u32], chunk: usize) -> Tensor {
    let tape = Tape::new();
    let vars = params.bind(&tape, |_, _| false);
    let mut state = model.empty_state();
    let mut rows = Vec::new();
    for part in inputs.chunks(chunk) {
        rows.push(
            model
                .forward_chunk(&tape, &vars, part, &mut state, 0.0)
                .unwrap()
                .logits,
        );
    }
    tape.concat_rows(&rows).unwrap().value()
}

#[test]
fn toy_parameter_count_matches_closed_form() {
    let spec = ModelSpec::toy();
    let model = Model::new(&spec).unwrap();
    let (v, d, l, h) = (257usize, 384usize, 2usize, 1024usize);
    assert_eq!(default_hidden(384), h);
    let expected = v * d + d * v + d + l * (d + 3 * d * h);
    assert_eq!(model.param_count(), expected);
    assert_eq!(model.init(0).count(), expected);
}

#[test]
fn same_seed_gives_identical_parameters() {
    let model = Model::new(&small(Attention::Full, Variant::E2e)).unwrap();
    assert_eq!(model.init(5), model.init(5));
    assert_ne!(model.init(5), model.init(6));
}

#[test]
fn dual_mlp_preserves_parameter_count() {
    for (l, frac) in [
        (2, FastFraction::All),
        (4, FastFraction::Quarter),
        (8, FastFraction::Half),
        (12, FastFraction::Quarter),
    ] {
        let mut spec = ModelSpec::toy();
        spec.n_blocks = l;
        spec.embed_dim = 64;
        spec.n_heads = 4;
        spec.mlp_hidden_dim = default_hidden(64);
        spec.attention = Attention::Sliding(32);
        spec.ttt_variant = Variant::E2e;
        spec.fast_fraction = frac;
        let single = Model::new(&spec).unwrap().param_count() as f64;
        spec.dual_mlp = true;
        let dual = Model::new(&spec).unwrap().param_count() as f64;
        assert!(
            (dual - single).abs() / single < 0.01,
            "L={l}: {dual} vs {single}"
        );
    }
}

#[test]
fn fast_partition_covers_only_trailing_mlps() {
    let mut spec = small(Attention::Sliding(4), Variant::E2e);
    spec.n_blocks = 4;
    spec.fast_fraction = FastFraction::Quarter;
    spec.dual_mlp = true;
    let p = Model::new(&spec).unwrap().init(0);
    let fast = p.fast_names();
    assert_eq!(
        fast,
        vec!["block3.mlp.w_gate", "block3.mlp.w_up", "block3.mlp.w_down"]
    );
    for name in p.slow_names() {
        assert!(!fast.contains(&name));
    }
    assert_eq!(p.fast_names().len() + p.slow_names().len(), p.len());
    assert!(p.get("block3.static_mlp.w_up").is_some());
    assert!(p.get("block2.static_mlp.w_up").is_none());
}

#[test]
fn multi_head_variants_layout() {
    let kvb = Model::new(&small(Attention::Sliding(4), Variant::Kvb)).unwrap();
    let simple = Model::new(&small(Attention::Sliding(4), Variant::KvbSimplified)).unwrap();
    assert_eq!(kvb.param_names(), simple.param_names());
    let e2e = Model::new(&small(Attention::Sliding(4), Variant::E2e)).unwrap();
    assert!(e2e.param_names().iter().all(|n| !n.contains("kvb")));
    let mh = Model::new(&small(Attention::Sliding(4), Variant::E2eAllLayersMh)).unwrap();
    let p = mh.init(0);
    assert!(p.fast_names().iter().all(|n| n.contains("fast_mh")));
    assert!(mh.param_names().iter().all(|n| !n.contains("theta")));
}

#[test]
fn multi_head_fast_state_follows_closed_form() {
    // Two matrices of per-head hidden `e · dh`: `2e · D² / H` per block.
    let mut spec = small(Attention::Sliding(4), Variant::E2eAllLayersMh);
    spec.embed_dim = 16;
    spec.n_heads = 4;
    spec.mlp_hidden_dim = 40;
    let p = Model::new(&spec).unwrap().init(0);
    let c = 2 * spec.mh_expansion;
    assert_eq!(p.fast_count(), spec.n_blocks * c * 16 * 16 / 4);
}

#[test]
fn sliding_window_mask_counts() {
    let m = sliding_window_mask(4, 1);
    for t in 0..4 {
        for s in 0..4 {
            assert_eq!(m[t][s], t == s);
        }
    }
    let m = sliding_window_mask(5, 9);
    for t in 0..5 {
        for s in 0..5 {
            assert_eq!(m[t][s], s <= t);
        }
    }
    let m = sliding_window_mask(5, 2);
    assert_eq!(m.iter().flatten().filter(|&&b| b).count(), 9);
    assert_eq!(m[4], vec![false, false, false, true, true]);
}

#[test]
fn rope_properties() {
    let x = Tensor::matrix(3, 4, (0..12).map(|v| (v as f64 * 0.7).cos()).collect()).unwrap();
    let at_zero = apply_rope(&x, &[0, 0, 0], 10_000.0).unwrap();
    assert_eq!(at_zero, x);
    let r = apply_rope(&x, &[3, 17, 250], 10_000.0).unwrap();
    for (a, b) in x.data().chunks(2).zip(r.data().chunks(2)) {
        let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
        let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
        assert!((na - nb).abs() < 1e-12);
    }
    let unit = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let r = apply_rope(&unit, &[1], 10_000.0).unwrap();
    assert!((r.data()[0] - 1f64.cos()).abs() < 1e-15);
    assert!((r.data()[1] - 1f64.sin()).abs() < 1e-15);
    assert!(apply_rope(&Tensor::matrix(1, 3, vec![1.0; 3]).unwrap(), &[0], 1e4).is_err());
}

#[test]
fn qk_norm_properties() {
    let ones = Tensor::from_vec(vec![1.0, 1.0]);
    let unit = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
    let (q, _) = qk_normalize(&unit, &unit, &ones, &ones, 1e-6).unwrap();
    assert!(q.max_abs_diff(&unit) < 1e-6);
    let v = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
    let (q, k) = qk_normalize(
        &v,
        &Tensor::matrix(1, 2, vec![30.0, 40.0]).unwrap(),
        &ones,
        &ones,
        1e-6,
    )
    .unwrap();
    assert!((q.data()[0] - 0.848528137).abs() < 1e-7);
    assert!((q.data()[1] - 1.131370849).abs() < 1e-7);
    assert!(q.max_abs_diff(&k) < 1e-7);
    let zero = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
    let (z, _) = qk_normalize(&zero, &zero, &ones, &ones, 1e-6).unwrap();
    assert!(z.is_finite());
}

#[test]
fn attention_free_model_is_a_bigram() {
    let model = Model::new(&small(Attention::None, Variant::Off)).unwrap();
    let p = model.init(1);
    let a = tokens(9, 11, 0);
    let mut b = tokens(9, 11, 4);
    b[5] = a[5];
    let la = model.forward(&p, &a).unwrap();
    let lb = model.forward(&p, &b).unwrap();
    let v = 11;
    assert_eq!(&la.data()[5 * v..6 * v], &lb.data()[5 * v..6 * v]);
}

#[test]
fn wide_window_equals_full_attention() {
    let inputs = tokens(12, 11, 2);
    let full = Model::new(&small(Attention::Full, Variant::Off)).unwrap();
    let p = full.init(3);
    let wide = Model::new(&small(Attention::Sliding(12), Variant::Off)).unwrap();
    let a = full.forward(&p, &inputs).unwrap();
    let b = wide.forward(&p, &inputs).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-10);
    assert_eq!(a, b);
}

#[test]
fn chunked_forward_is_bit_identical() {
    for attention in [Attention::None, Attention::Full, Attention::Sliding(3)] {
        for variant in [Variant::Off, Variant::E2eAllLayersMh] {
            let model = Model::new(&small(attention, variant)).unwrap();
            let p = model.init(4);
            let inputs = tokens(13, 11, 1);
            let whole = model.forward(&p, &inputs).unwrap();
            for chunk in [1, 4, 5] {
                assert_eq!(
                    chunked_logits(&model, &p, &inputs, chunk),
                    whole,
                    "{attention:?} {variant:?} chunk {chunk}"
                );
            }
        }
    }
}

#[test]
fn logits_are_causal_for_every_variant() {
    for attention in [Attention::Full, Attention::Sliding(3)] {
        for variant in Variant::ALL {
            let model = Model::new(&small(attention, variant)).unwrap();
            let p = model.init(7);
            let a = tokens(10, 11, 0);
            for s in [0usize, 4, 9] {
                let mut b = a.clone();
                b[s] = (b[s] + 1) % 11;
                for eta in [0.0, 0.5] {
                    let run = |x: &[u32]| {
                        let tape = Tape::new();
                        let vars = p.bind(&tape, |_, _| false);
                        let mut st = model.empty_state();
                        model
                            .forward_chunk(&tape, &vars, x, &mut st, eta)
                            .unwrap()
                            .logits
                            .value()
                    };
                    let (la, lb) = (run(&a), run(&b));
                    let v = 11;
                    assert_eq!(
                        &la.data()[..s * v],
                        &lb.data()[..s * v],
                        "{attention:?} {variant:?} s={s}"
                    );
                    assert_ne!(
                        &la.data()[s * v..(s + 1) * v],
                        &lb.data()[s * v..(s + 1) * v]
                    );
                }
            }
        }
    }
}

#[test]
fn window_limits_dependence() {
    let model = Model::new(&small(Attention::Sliding(2), Variant::Off)).unwrap();
    let mut spec1 = small(Attention::Sliding(2), Variant::Off);
    spec1.n_blocks = 1;
    let one = Model::new(&spec1).unwrap();
    let p = one.init(2);
    let a = tokens(6, 11, 0);
    let mut b = a.clone();
    b[2] = (b[2] + 3) % 11;
    let la = one.forward(&p, &a).unwrap();
    let lb = one.forward(&p, &b).unwrap();
    let v = 11;
    // One block with window 2: position 4 sees only positions 3 and 4.
    assert_eq!(&la.data()[4 * v..5 * v], &lb.data()[4 * v..5 * v]);
    assert_ne!(&la.data()[3 * v..4 * v], &lb.data()[3 * v..4 * v]);
    let _ = model;
}

#[test]
fn every_parameter_reaches_the_loss() {
    for variant in Variant::ALL {
        let mut spec = small(Attention::Sliding(3), variant);
        spec.dual_mlp = true;
        let model = Model::new(&spec).unwrap();
        let p = model.init(9);
        let tape = Tape::new();
        let vars = p.bind(&tape, |_, _| true);
        let inputs = tokens(6, 11, 3);
        let mut st = model.empty_state();
        // Two chunks, so that reconstruction targets reach the loss through
        // the updated fast weights.
        let first = model
            .forward_chunk(&tape, &vars, &inputs[..3], &mut st, 0.1)
            .unwrap();
        let mut next = vars.clone();
        for (i, w) in &first.fast_updates {
            next[*i] = *w;
        }
        let second = model
            .forward_chunk(&tape, &next, &inputs[3..5], &mut st, 0.1)
            .unwrap();
        let logits = tape.concat_rows(&[first.logits, second.logits]).unwrap();
        let loss = token_losses(logits, &inputs[1..]).unwrap().sum().unwrap();
        let g = tape.backward(loss, &vars).unwrap();
        let orphans: Vec<&str> = g.unreachable.iter().map(|&i| p.name(i)).collect();
        if variant == Variant::KvbSimplified {
            assert!(
                orphans.iter().all(|n| n.ends_with("theta_q")),
                "{orphans:?}"
            );
        } else {
            assert!(orphans.is_empty(), "{variant}: {orphans:?}");
        }
    }
}

#[test]
fn random_init_loss_is_near_uniform() {
    let model = Model::new(&ModelSpec {
        vocab_size: 257,
        embed_dim: 32,
        n_heads: 4,
        mlp_hidden_dim: 85,
        ..small(Attention::None, Variant::Off)
    })
    .unwrap();
    let p = model.init(0);
    let inputs: Vec<u32> = (0..40).map(|i| (i * 37 % 256) as u32).collect();
    let logits = model.forward(&p, &inputs[..39]).unwrap();
    let mut total = 0.0;
    for (t, &target) in inputs[1..].iter().enumerate() {
        let row = Tensor::from_vec(logits.data()[t * 257..(t + 1) * 257].to_vec());
        total += softmax_cross_entropy(&row, target as usize).unwrap();
    }
    let mean = total / 39.0;
    assert!((5.0..6.2).contains(&mean), "{mean}");
}

#[test]
fn cross_entropy_rejects_bad_targets() {
    let l = Tensor::from_vec(vec![0.0; 4]);
    assert!(matches!(softmax_cross_entropy(&l, 4), Err(Error::Index(_))));
    assert!(softmax_cross_entropy(&l, 3).unwrap() >= 0.0);
}

#[test]
fn empty_input_is_rejected() {
    let model = Model::new(&small(Attention::None, Variant::Off)).unwrap();
    assert!(model.forward(&model.init(0), &[]).is_err());
}
